import math

import numpy as np
import pytest

from fmeac import urban
from fmeac.config import defaults_for
from fmeac.errors import ContractError


@pytest.fixture(scope="module")
def cfg():
    return defaults_for(preset="toy-urban")


@pytest.fixture(scope="module")
def m0(cfg):
    return urban.generate_map(0, cfg)


def test_map_deterministic_and_roundtrip(cfg):
    a = urban.dumps_map(urban.generate_map(3, cfg))
    b = urban.dumps_map(urban.generate_map(3, cfg))
    assert a == b
    assert a.splitlines()[0] == "FMEAC-MAP urban v1"
    assert urban.dumps_map(urban.loads_map(a)) == a


def test_map_family_distinct(cfg):
    texts = {urban.dumps_map(urban.generate_map(s, cfg)) for s in range(10)}
    assert len(texts) == 10


def test_map_counts_and_bounds():
    cfg = defaults_for("urban")
    for s in range(3):
        m = urban.generate_map(s, cfg)
        assert m.n_bs in (3, 4)
        assert 20 <= m.n_gd <= 50 and 0 <= m.n_pd <= 50
        pts = np.concatenate([m.bs[:, :2], m.gd[:, :2], m.uav[:, :2], m.uav[:, 3:5]])
        assert np.all(pts >= 0) and np.all(pts <= 800)
        for t in (0.0, 37.0, 99.0):
            pd = m.pd_positions(t)
            assert np.all(pd[:, :2] >= 0) and np.all(pd[:, :2] <= 800)


def test_zero_pd_map_runs(cfg):
    c = cfg.replace(pd_min=0, pd_max=0)
    m = urban.generate_map(1, c)
    assert m.n_pd == 0
    st = urban.reset(m, c)
    res = urban.step(st, m, c, np.zeros((c.n_uav, 3 + c.uplink_limit)))
    assert np.all(np.isfinite(res.reward))


def _fine_los(m, p1, p2, factor=10):
    n = int(math.ceil(np.linalg.norm(np.subtract(p2, p1)[:2]) / m.cell_size * factor)) + 2
    for t in np.linspace(0, 1, n):
        p = np.asarray(p1) + t * (np.asarray(p2) - np.asarray(p1))
        if p[2] < float(m.height_at(p[0], p[1])):
            return False
    return True


def test_los_trivial_cases(m0):
    top = m0.heights.max() + 1
    assert urban.los_test(m0, (5, 5, top), (290, 290, top))
    ix, iy = np.unravel_index(np.argmax(m0.heights), m0.heights.shape)
    cx, cy = (ix + 0.5) * m0.cell_size, (iy + 0.5) * m0.cell_size
    low = m0.heights[ix, iy] / 2
    assert not urban.los_test(m0, (cx - m0.cell_size, cy, low), (cx + m0.cell_size, cy, low))


def test_los_agrees_with_oversampled_oracle(m0):
    # the exact traversal can only find blockages that sampling misses, never the reverse
    rng = np.random.default_rng(0)
    agree, exact_only = 0, 0
    for _ in range(1000):
        p1 = np.r_[rng.uniform(0, 300, 2), rng.uniform(0, 150)]
        p2 = np.r_[rng.uniform(0, 300, 2), rng.uniform(0, 5)]
        exact, fine = urban.los_test(m0, p1, p2), _fine_los(m0, p1, p2)
        agree += exact == fine
        if exact and not fine:
            exact_only += 1
    assert exact_only == 0
    assert agree >= 995


def test_associate_iot_rules(cfg):
    assert list(urban.associate_iot(np.array([150.0]), cfg)) == [0]
    assert list(urban.associate_iot(np.array([80.0, 70.0, 70.0, 70.0, 90.0]), cfg)) == [1, 2, 3]
    assert len(urban.associate_iot(np.zeros(0), cfg)) == 0


def test_associate_iot_vs_full_sort(cfg):
    rng = np.random.default_rng(1)
    for _ in range(50):
        pl = rng.uniform(60, 140, rng.integers(1, 40))
        got = list(urban.associate_iot(pl, cfg))
        ref = sorted(range(len(pl)), key=lambda j: (pl[j], j))[:cfg.uplink_limit]
        assert got == ref


def test_qos_examples(cfg):
    assert urban.qos(np.zeros(0)) == 0.0
    assert urban.qos(np.array([1.0])) == 1.0
    s = np.array([0.5, 3.0, 12.0])
    assert urban.qos(s) == pytest.approx(sum(cfg.bandwidth * math.log2(1 + x) for x in s) / cfg.bandwidth)


def test_observation_layout(cfg, m0):
    st = urban.reset(m0, cfg)
    o = urban.observe(st, m0, cfg, 0, f_env=np.zeros(32))
    assert len(o) == urban.obs_dim(cfg, 32) == 12 + 4 * cfg.uplink_limit + 32
    assert urban.obs_dim(defaults_for("urban"), 32) == 56
    st2 = st.copy()
    st2.pos[0] = m0.uav[0, 3:6]
    assert urban.observe(st2, m0, cfg, 0)[6] == 0.0


def test_observation_pads_without_iot(cfg):
    c = cfg.replace(gd_min=0, gd_max=0, pd_min=0, pd_max=0)
    m = urban.generate_map(2, c)
    st = urban.reset(m, c)
    o = urban.observe(st, m, c, 0)
    assert np.all(o[12:] == 0.0)


def test_shape_action_feasible():
    cfg = defaults_for("urban")
    rng = np.random.default_rng(2)
    for _ in range(500):
        raw = rng.normal(0, 20, 3 + cfg.uplink_limit)
        v, delta = urban.shape_action(raw, cfg)
        assert np.all(np.abs(v) <= 8.0)
        assert np.all(delta >= 0) and delta.sum() <= cfg.epsilon_alloc + 1e-9
    with pytest.raises(ContractError):
        urban.shape_action(np.zeros(4), cfg)


def test_step_shape_contract(cfg, m0):
    st = urban.reset(m0, cfg)
    with pytest.raises(ContractError):
        urban.step(st, m0, cfg, np.zeros((cfg.n_uav, 3)))


def test_zero_action_no_progress(cfg):
    c = cfg.replace(pd_min=0, pd_max=0)
    m = urban.generate_map(4, c)
    st = urban.reset(m, c)
    res = urban.step(st, m, c, np.zeros((c.n_uav, 3 + c.uplink_limit)))
    np.testing.assert_array_equal(res.terms[:, 0], 0.0)


def _toward(m, st, cfg):
    acts = np.zeros((cfg.n_uav, 3 + cfg.uplink_limit))
    for i in range(cfg.n_uav):
        d = m.uav[i, 3:6] - st.pos[i]
        n = np.linalg.norm(d)
        acts[i, :3] = d / n * 8.0 if n > 1e-9 else 0.0
        acts[i, 3:] = cfg.epsilon_alloc / cfg.uplink_limit
    return acts


def test_straight_flight_progress_positive(cfg, m0):
    st = urban.reset(m0, cfg)
    for _ in range(5):
        res = urban.step(st, m0, cfg, _toward(m0, st, cfg))
        assert np.all(res.terms[res.active, 0] > 0)
        st = res.state


def test_scripted_episode_replay_oracle(cfg, m0):
    """Recompute every reward from before/after states with the documented term definitions."""
    a = cfg.alphas
    st = urban.reset(m0, cfg)
    total, replay = 0.0, 0.0
    while not st.done.all():
        acts = _toward(m0, st, cfg)
        res = urban.step(st, m0, cfg, acts)
        new = res.state
        for i in np.flatnonzero(res.active):
            dest = m0.uav[i, 3:6]
            dd = np.linalg.norm(dest - st.pos[i]) - np.linalg.norm(dest - new.pos[i])
            mid = 0.5 * (cfg.z_min + cfg.z_max)
            dh = abs(st.pos[i, 2] - mid) - abs(new.pos[i, 2] - mid)
            ds = 10 * math.log10(new.sinr_ub[i]) - 10 * math.log10(st.sinr_ub[i])
            de = st.ledgers[i].ec - new.ledgers[i].ec
            dq = st.qos[i] - new.qos[i]
            others = [np.linalg.norm(new.pos[i] - new.pos[j]) for j in range(cfg.n_uav) if j != i]
            before = [np.linalg.norm(st.pos[i] - st.pos[j]) for j in range(cfg.n_uav) if j != i]
            raw = st.pos[i] + np.clip(acts[i, :3], -8, 8) * cfg.dt
            hit = (np.any(raw < cfg.lo) or np.any(raw > cfg.hi) or min(others) < cfg.d_safe
                   or new.pos[i, 2] < float(m0.height_at(new.pos[i, 0], new.pos[i, 1])))
            r = (a[0] * dd + a[1] * dh + a[2] * ds + a[3] * de + a[4] * dq - a[5] * float(hit)
                 + a[6] * (min(before) - min(others)))
            replay += r
            assert res.reward[i] == pytest.approx(r, rel=1e-9, abs=1e-9)
            assert res.reward_sec[i] == pytest.approx(a[7] * new.qos[i], rel=1e-12)
        total += res.reward.sum()
        st = new
        assert st.k <= cfg.k_end
    assert total == pytest.approx(replay, rel=1e-9)


def test_links_and_allocation_invariants(cfg, m0):
    rng = np.random.default_rng(3)
    st = urban.reset(m0, cfg)
    for _ in range(40):
        raw = rng.normal(0, 5, (cfg.n_uav, 3 + cfg.uplink_limit))
        res = urban.step(st, m0, cfg, raw)
        st = res.state
        for i in range(cfg.n_uav):
            assert len(st.links[i]) <= cfg.uplink_limit
        assert np.all(st.pos >= np.asarray(cfg.lo) - 1e-12) and np.all(st.pos <= np.asarray(cfg.hi) + 1e-12)
        if st.done.all():
            break


def test_done_is_absorbing_and_completion_time(cfg, m0):
    st = urban.reset(m0, cfg)
    zero = np.zeros((cfg.n_uav, 3 + cfg.uplink_limit))
    while not st.done.all():
        st = urban.step(st, m0, cfg, zero).state
    assert st.k == cfg.k_end
    res = urban.step(st, m0, cfg, zero)
    assert not res.active.any() and np.all(res.reward == 0)
    np.testing.assert_array_equal(urban.completion_time(st, cfg), cfg.k_end * cfg.dt)


def test_step_deterministic(cfg, m0):
    rng = np.random.default_rng(4)
    acts = rng.normal(0, 5, (6, cfg.n_uav, 3 + cfg.uplink_limit))
    outs = []
    for _ in range(2):
        st = urban.reset(m0, cfg)
        rs = []
        for a in acts:
            res = urban.step(st, m0, cfg, a)
            rs.append(res.reward.copy())
            st = res.state
        outs.append(np.array(rs))
    np.testing.assert_array_equal(outs[0], outs[1])


def test_feature_inputs(cfg, m0):
    st = urban.reset(m0, cfg)
    g = urban.graph_nodes(st, m0, cfg)
    assert g.shape == (cfg.n_uav + m0.n_bs + m0.n_gd + m0.n_pd, urban.NODE_DIM)
    assert len(g) <= urban.max_nodes(cfg)
    np.testing.assert_array_equal(g[:, :4].sum(axis=1), 1.0)
    pts = urban.point_array(0, m0, cfg)
    assert pts.shape == (m0.n_gd + m0.n_pd, urban.POINT_DIM)
