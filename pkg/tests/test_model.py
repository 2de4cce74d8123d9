import numpy as np
import pytest

from mrm import diffcore as dc
from mrm import model as mm
from mrm.events import ClinicalEvent, EventSequence


def small_config(**overrides):
    base = dict(n_codes=12, n_features=6, max_features=3, model_dim=8,
                n_heads=2, head_dim=4, topk=2, window_hours=0.5,
                max_groups=4, max_group_len=4)
    base.update(overrides)
    return mm.MrmConfig(**base)


def random_sequence(rng, n_events, config, t_span=4.0, with_features=True):
    times = np.sort(rng.uniform(0.0, t_span, size=n_events))
    evs = []
    for t in times:
        cat, num = [], []
        if with_features:
            cat = [int(c) for c in rng.choice(config.n_features,
                                              size=rng.integers(0, 2),
                                              replace=False)]
            if rng.random() < 0.5:
                num = [(int(rng.integers(0, config.n_features)), float(rng.normal()))]
        evs.append(ClinicalEvent(int(rng.integers(0, config.n_codes)), float(t),
                                 cat, num))
    return EventSequence("p", int(rng.integers(0, 2)), evs)


# ---------------------------------------------------------------------------
# straight-line oracles: explicit loops over the defining formulas, no code
# shared with the implementation


def sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def oracle_encode(seq, arrays):
    rows = []
    for e in seq.events:
        x = arrays["code_embedding"][e.code].copy()
        for f in e.cat_features:
            x = x + arrays["cat_embedding"][f]
        for f, v in e.num_features:
            x = x + v * arrays["num_projection"][f]
        rows.append(x)
    return np.array(rows)


def oracle_attention(x, times, arrays, config):
    n = len(times)
    out = np.zeros((n, config.model_dim))
    for i in range(n):
        ne = [j for j in range(n)
              if abs(times[j] - times[i]) <= config.window_hours]
        heads = []
        for h in range(config.n_heads):
            wq = arrays[f"head{h}.query_weight"]
            wk = arrays[f"head{h}.key_weight"]
            wv = arrays[f"head{h}.value_weight"]
            q = wq @ x[i]
            scores = np.array([q @ (wk @ x[j]) for j in ne])
            order = sorted(range(len(ne)), key=lambda k: (-scores[k], k))
            kept = sorted(order[:min(config.topk, len(ne))])
            e = np.exp(scores[kept] - scores[kept].max())
            weights = e / e.sum()
            head = np.zeros(config.head_dim)
            for w, k in zip(weights, kept):
                head = head + w * (wv @ x[ne[k]])
            heads.append(head)
        out[i] = np.concatenate(heads)
    return out


def oracle_lstm_step(x, h, c, arrays):
    pre = arrays["lstm.w_input"] @ x + arrays["lstm.w_hidden"] @ h + arrays["lstm.bias"]
    d = h.size
    i = sig(pre[:d])
    f = sig(pre[d:2 * d])
    g = np.tanh(pre[2 * d:3 * d])
    o = sig(pre[3 * d:4 * d])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def oracle_partition_groups(times, max_groups, max_group_len):
    """Exhaustive minimax span, then a fresh greedy scan at that span."""
    n = len(times)

    def parts(start, used):
        if start == n:
            yield []
            return
        if used == max_groups:
            return
        for end in range(start + 1, min(n, start + max_group_len) + 1):
            for rest in parts(end, used + 1):
                yield [(start, end)] + rest

    best = min(max(times[e - 1] - times[s] for s, e in p)
               for p in parts(0, 0))
    groups, start = [], 0
    for i in range(1, n):
        if i - start >= max_group_len or times[i] - times[start] > best:
            groups.append((start, i))
            start = i
    groups.append((start, n))
    return groups


def oracle_forward(seq, arrays, config):
    x = oracle_encode(seq, arrays)
    times = [e.t for e in seq.events]
    v = oracle_attention(x, times, arrays, config)
    groups = oracle_partition_groups(times, config.max_groups, config.max_group_len)
    h = np.zeros(config.model_dim)
    c = np.zeros(config.model_dim)
    for s, e in groups:
        h, c = oracle_lstm_step(v[s:e].max(axis=0), h, c, arrays)
    return float(sig(arrays["output.weight"] @ h + arrays["output.bias"]))


def oracle_plain_lstm(seq, arrays, config):
    x = oracle_encode(seq, arrays)
    h = np.zeros(config.model_dim)
    c = np.zeros(config.model_dim)
    for i in range(x.shape[0]):
        h, c = oracle_lstm_step(x[i], h, c, arrays)
    return float(sig(arrays["output.weight"] @ h + arrays["output.bias"]))


# ---------------------------------------------------------------------------
# config and params


def test_config_rejects_head_dim_mismatch():
    with pytest.raises(mm.ConfigError):
        small_config(head_dim=7, n_heads=8, model_dim=64)


def test_config_rejects_bad_topk_and_window():
    with pytest.raises(mm.ConfigError):
        small_config(topk=0)
    with pytest.raises(mm.ConfigError):
        small_config(window_hours=0.0)


def test_params_roundtrip_through_arrays():
    config = small_config()
    params = mm.MrmParams.init(config, seed=3)
    clone = mm.MrmParams.from_arrays(params.arrays(), config, kind="mrm")
    for name, t in params.named().items():
        assert np.array_equal(t.data, clone.named()[name].data)


def test_params_from_arrays_rejects_mismatch():
    config = small_config()
    arrays = mm.MrmParams.init(config, seed=0).arrays()
    del arrays["output.bias"]
    with pytest.raises(mm.ConfigError):
        mm.MrmParams.from_arrays(arrays, config)


# ---------------------------------------------------------------------------
# event encoding


def test_encode_bare_event_is_code_embedding():
    config = small_config()
    params = mm.MrmParams.init(config, seed=1)
    seq = EventSequence("p", 0, [ClinicalEvent(5, 0.0, [], [])])
    x = mm.encode_events(seq, params, config)
    assert np.array_equal(x.data[0], params.code_embedding.data[5])


def test_encode_zero_valued_numeric_contributes_nothing():
    config = small_config()
    params = mm.MrmParams.init(config, seed=1)
    bare = EventSequence("p", 0, [ClinicalEvent(5, 0.0, [], [])])
    zeroed = EventSequence("p", 0, [ClinicalEvent(5, 0.0, [], [(2, 0.0)])])
    a = mm.encode_events(bare, params, config)
    b = mm.encode_events(zeroed, params, config)
    assert np.array_equal(a.data, b.data)


def test_encode_matches_formula_oracle():
    config = small_config()
    params = mm.MrmParams.init(config, seed=2)
    rng = np.random.default_rng(0)
    for _ in range(20):
        seq = random_sequence(rng, int(rng.integers(1, 10)), config)
        x = mm.encode_events(seq, params, config)
        assert np.allclose(x.data, oracle_encode(seq, params.arrays()), atol=1e-12)


def test_encode_rejects_out_of_range_code():
    config = small_config()
    params = mm.MrmParams.init(config, seed=1)
    seq = EventSequence("p", 0, [ClinicalEvent(config.n_codes, 0.0, [], [])])
    with pytest.raises(ValueError):
        mm.encode_events(seq, params, config)


# ---------------------------------------------------------------------------
# neighborhood and top-k


def test_neighborhood_window_example():
    assert set(mm.neighborhood(0, [0.0, 0.4, 2.0], 0.5)) == {0, 1}


def test_neighborhood_always_contains_self():
    rng = np.random.default_rng(1)
    times = np.sort(rng.uniform(0, 10, size=30))
    for i in range(30):
        assert i in mm.neighborhood(i, times, 0.25)


def test_neighborhood_matches_brute_scan():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 25))
        times = np.sort(rng.choice([0.0, 0.1, 0.3, 0.9, 2.0, 2.4, 5.0], size=n))
        window = float(rng.choice([0.1, 0.5, 1.0]))
        i = int(rng.integers(0, n))
        brute = {j for j in range(n) if abs(times[j] - times[i]) <= window}
        assert set(mm.neighborhood(i, times, window)) == brute


def test_topk_mask_selects_largest():
    assert np.array_equal(mm.topk_mask([3.0, 1.0, 2.0], 2), [True, False, True])


def test_topk_mask_keeps_all_when_k_large():
    assert np.array_equal(mm.topk_mask([1.0, 2.0], 5), [True, True])


def test_topk_mask_ties_resolve_to_lowest_index():
    assert np.array_equal(mm.topk_mask([5.0, 5.0, 5.0], 2), [True, True, False])


def test_topk_mask_count_is_exact():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 12))
        scores = rng.choice([0.0, 1.0, 2.0], size=n)  # plenty of ties
        k = int(rng.integers(1, 14))
        assert mm.topk_mask(scores, k).sum() == min(k, n)


# ---------------------------------------------------------------------------
# sparse attention


def test_attention_single_event_is_value_projection():
    config = small_config()
    params = mm.MrmParams.init(config, seed=4)
    seq = EventSequence("p", 0, [ClinicalEvent(3, 1.0, [], [])])
    x = mm.encode_events(seq, params, config)
    v = mm.sparse_attention(x, seq.times(), params, config)
    expected = np.concatenate([params.value_weights[h].data @ x.data[0]
                               for h in range(config.n_heads)])
    assert np.allclose(v.data[0], expected, atol=1e-12)


def test_attention_identical_neighbors_share_weight_equally():
    config = small_config()
    params = mm.MrmParams.init(config, seed=5)
    seq = EventSequence("p", 0, [ClinicalEvent(3, 1.0, [], []),
                                 ClinicalEvent(3, 1.1, [], [])])
    x = mm.encode_events(seq, params, config)
    v, weights = mm.sparse_attention(x, seq.times(), params, config,
                                     return_weights=True)
    for w in weights:
        assert np.allclose(w, 0.5, atol=1e-12)
    single = np.concatenate([params.value_weights[h].data @ x.data[0]
                             for h in range(config.n_heads)])
    assert np.allclose(v.data[0], single, atol=1e-12)
    assert np.allclose(v.data[1], single, atol=1e-12)


def test_attention_matches_straight_line_oracle():
    rng = np.random.default_rng(6)
    for trial in range(30):
        config = small_config(n_heads=1, head_dim=8) if trial % 2 else small_config()
        params = mm.MrmParams.init(config, seed=trial)
        seq = random_sequence(rng, int(rng.integers(1, 9)), config)
        x = mm.encode_events(seq, params, config)
        v = mm.sparse_attention(x, seq.times(), params, config)
        expected = oracle_attention(x.data, [e.t for e in seq.events],
                                    params.arrays(), config)
        assert np.max(np.abs(v.data - expected)) < 1e-10


def test_attention_rows_are_convex_combinations():
    config = small_config()
    params = mm.MrmParams.init(config, seed=7)
    rng = np.random.default_rng(7)
    seq = random_sequence(rng, 15, config)
    x = mm.encode_events(seq, params, config)
    _, weights = mm.sparse_attention(x, seq.times(), params, config,
                                     return_weights=True)
    for w in weights:
        assert np.all(w >= 0.0)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((w > 0).sum(axis=1) <= config.topk)


def test_attention_locality_outside_window():
    # x_j with j outside Ne(i) must not move v_i at all
    config = small_config()
    params = mm.MrmParams.init(config, seed=8)
    rng = np.random.default_rng(8)
    times = np.array([0.0, 0.1, 0.3, 2.0, 2.2, 5.0])
    seq = EventSequence("p", 0, [ClinicalEvent(int(rng.integers(0, 12)), float(t), [], [])
                                 for t in times])
    x = mm.encode_events(seq, params, config)
    base_x = dc.Tensor(x.data.copy())
    base_v = mm.sparse_attention(base_x, times, params, config).data
    for j in range(len(times)):
        for h_step in (1e-5, 1e-2):
            bumped = dc.Tensor(base_x.data.copy())
            bumped.data[j] += h_step * rng.normal(size=config.model_dim)
            v2 = mm.sparse_attention(bumped, times, params, config).data
            for i in range(len(times)):
                if j not in mm.neighborhood(i, times, config.window_hours):
                    assert np.max(np.abs(v2[i] - base_v[i])) <= 1e-14


# ---------------------------------------------------------------------------
# forward, loss, plain LSTM


def test_forward_single_event_matches_manual_pipeline():
    config = small_config()
    params = mm.MrmParams.init(config, seed=9)
    seq = EventSequence("p", 1, [ClinicalEvent(2, 0.7, [], [])])
    y_hat, diag = mm.forward(seq, params, config)
    assert diag["n_groups"] == 1
    arrays = params.arrays()
    g = np.concatenate([arrays[f"head{h}.value_weight"] @ oracle_encode(seq, arrays)[0]
                        for h in range(config.n_heads)])
    h, _ = oracle_lstm_step(g, np.zeros(8), np.zeros(8), arrays)
    expected = sig(arrays["output.weight"] @ h + arrays["output.bias"])
    assert 0.0 < y_hat.item() < 1.0
    assert abs(y_hat.item() - expected) < 1e-12


def test_forward_all_zero_parameters_gives_half():
    config = small_config()
    params = mm.MrmParams.init(config, seed=10)
    for t in params.named().values():
        t.data = np.zeros_like(t.data)
    rng = np.random.default_rng(10)
    for _ in range(5):
        seq = random_sequence(rng, int(rng.integers(1, 12)), config)
        y_hat, _ = mm.forward(seq, params, config)
        assert y_hat.item() == 0.5
        assert mm.plain_lstm_forward(seq, params, config).item() == 0.5


def test_forward_matches_straight_line_oracle():
    rng = np.random.default_rng(11)
    config = small_config(max_groups=3, max_group_len=4)
    for trial in range(10):
        params = mm.MrmParams.init(config, seed=100 + trial)
        seq = random_sequence(rng, int(rng.integers(2, 9)), config)
        y_hat, _ = mm.forward(seq, params, config)
        assert abs(y_hat.item() - oracle_forward(seq, params.arrays(), config)) < 1e-10


def test_plain_lstm_matches_straight_line_oracle():
    rng = np.random.default_rng(12)
    config = small_config()
    for trial in range(10):
        params = mm.MrmParams.init(config, seed=200 + trial, kind="plain_lstm")
        seq = random_sequence(rng, int(rng.integers(1, 14)), config)
        y_hat = mm.plain_lstm_forward(seq, params, config)
        assert 0.0 < y_hat.item() < 1.0
        assert abs(y_hat.item() - oracle_plain_lstm(seq, params.arrays(), config)) < 1e-10


def test_forward_truncates_to_most_recent_events():
    config = small_config(max_groups=2, max_group_len=2)
    params = mm.MrmParams.init(config, seed=13)
    rng = np.random.default_rng(13)
    seq = random_sequence(rng, 7, config)
    kept = EventSequence(seq.patient_id, seq.label, seq.events[-4:])
    full, diag = mm.forward(seq, params, config)
    manual, diag2 = mm.forward(kept, params, config)
    assert diag["truncated"] and not diag2["truncated"]
    assert diag["n_events"] == 4
    assert full.item() == manual.item()


def test_forward_group_count_bounded():
    config = small_config()
    rng = np.random.default_rng(14)
    params = mm.MrmParams.init(config, seed=14)
    for _ in range(20):
        seq = random_sequence(rng, int(rng.integers(1, 16)), config)
        _, diag = mm.forward(seq, params, config)
        assert diag["n_groups"] <= config.max_groups


def test_forward_invariant_to_file_order_when_times_distinct(tmp_path):
    from mrm import events as events_mod
    config = small_config()
    params = mm.MrmParams.init(config, seed=15)
    rng = np.random.default_rng(15)
    seq = random_sequence(rng, 10, config)
    perm = [seq.events[i] for i in rng.permutation(10)]
    shuffled_file = tmp_path / "shuffled.jsonl"
    events_mod.write_dataset(shuffled_file, [EventSequence("p", seq.label, perm)])
    data_cfg = events_mod.DatasetConfig(config.n_codes, config.n_features,
                                        config.max_features)
    reloaded = events_mod.load_dataset(shuffled_file, data_cfg)[0]
    a, _ = mm.forward(seq, params, config)
    b, _ = mm.forward(reloaded, params, config)
    assert a.item() == b.item()


def test_loss_values():
    assert abs(mm.loss(dc.Tensor(0.5), 1).item() - 0.6931471805599453) < 1e-12
    assert abs(mm.loss(dc.Tensor(0.5), 0).item() - 0.6931471805599453) < 1e-12
    assert abs(mm.loss(dc.Tensor(0.9), 1).item() - 0.10536) < 1e-5


def test_loss_monotone_and_vanishing_at_truth():
    values = [0.5, 0.9, 0.99, 0.9999, 1.0 - 1e-9]
    losses = [mm.loss(dc.Tensor(v), 1).item() for v in values]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-6


def test_loss_rejects_bad_label():
    with pytest.raises(ValueError):
        mm.loss(dc.Tensor(0.5), 2)


# ---------------------------------------------------------------------------
# gradients


def test_end_to_end_gradients_match_finite_differences(make_instance, fd_grads,
                                                       grad_rel_err):
    for seed in (0, 1):
        seq, params, config = make_instance(seed)
        named = params.named()
        part = mm.sequence_partition(seq, config)

        def loss_value():
            y_hat, _ = mm.forward(seq, params, config, partition=part)
            return mm.loss(y_hat, seq.label).item()

        y_hat, _ = mm.forward(seq, params, config, partition=part)
        total = mm.loss(y_hat, seq.label)
        total.backward()
        analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                    for name, t in named.items()}
        numeric = fd_grads(loss_value, named)
        for name in named:
            assert grad_rel_err(analytic[name], numeric[name]) < 1e-4, name


def test_plain_lstm_gradients_match_finite_differences(fd_grads, grad_rel_err):
    config = small_config()
    params = mm.MrmParams.init(config, seed=21, kind="plain_lstm")
    rng = np.random.default_rng(21)
    seq = random_sequence(rng, 8, config)
    named = params.named()

    def loss_value():
        return mm.loss(mm.plain_lstm_forward(seq, params, config), 1).item()

    total = mm.loss(mm.plain_lstm_forward(seq, params, config), 1)
    total.backward()
    numeric = fd_grads(loss_value, named)
    for name in named:
        analytic = named[name].grad
        assert analytic is not None, name
        assert grad_rel_err(analytic, numeric[name]) < 1e-4, name


# ---------------------------------------------------------------------------
# fuzzing


def test_forward_fuzzed_sequences_stay_in_open_interval():
    config = small_config()
    rng = np.random.default_rng(99)
    for trial in range(100):
        params = mm.MrmParams.init(config, seed=int(rng.integers(0, 1 << 30)))
        n = int(rng.integers(1, 17))
        times = np.sort(np.round(rng.uniform(0, 3, size=n), 1))  # many ties
        evs = []
        for t in times:
            num = [(int(rng.integers(0, 6)), float(rng.normal(0, 50)))] \
                if rng.random() < 0.3 else []
            evs.append(ClinicalEvent(int(rng.integers(0, 12)), float(t), [], num))
        seq = EventSequence("p", 0, evs)
        y_hat, _ = mm.forward(seq, params, config)
        p = y_hat.item()
        assert np.isfinite(p) and 0.0 < p < 1.0
