import numpy as np
import pytest

from mrm import diffcore
from mrm import events as events_mod
from mrm import model as model_mod


def finite_difference_gradients(loss_fn, tensors, h=1e-5):
    """Central-difference gradients of a scalar loss for every element.

    loss_fn() must rebuild the forward pass from the tensors' current
    .data so each perturbed evaluation is independent of the graph under
    test.
    """
    out = {}
    with diffcore.no_grad():
        for name, t in tensors.items():
            g = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            gf = g.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                lp = float(loss_fn())
                flat[k] = orig - h
                lm = float(loss_fn())
                flat[k] = orig
                gf[k] = (lp - lm) / (2.0 * h)
            out[name] = g
    return out


def rel_err(analytic, numeric, floor=1e-6):
    """Max-norm relative disagreement between two gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(f).max(initial=0.0), floor)
    return float(np.abs(a - f).max(initial=0.0) / denom)


@pytest.fixture
def fd_grads():
    return finite_difference_gradients


@pytest.fixture
def grad_rel_err():
    return rel_err


def _selection_margins_ok(seq, params, config, margin):
    """True when the instance sits safely away from every non-smooth
    selection boundary (top-k threshold, max-pool argmax, probability
    clamp), so finite differences stay inside one selection region."""
    with diffcore.no_grad():
        x = model_mod.encode_events(seq, params, config)
        times = seq.times()
        lo, hi = model_mod.neighborhood_bounds(times, config.window_hours)
        for h in range(config.n_heads):
            q = x.data @ params.query_weights[h].data.T
            k = x.data @ params.key_weights[h].data.T
            scores = q @ k.T
            for i in range(len(times)):
                window = np.sort(scores[i, lo[i]:hi[i]])[::-1]
                if window.size > config.topk:
                    if window[config.topk - 1] - window[config.topk] < margin:
                        return False
        v = model_mod.sparse_attention(x, times, params, config)
        part = model_mod.sequence_partition(seq, config)
        for start, end in part.groups:
            if end - start < 2:
                continue
            block = np.sort(v.data[start:end], axis=0)
            if np.min(block[-1] - block[-2]) < margin:
                return False
        y_hat, _ = model_mod.forward(seq, params, config, partition=part)
        p = y_hat.item()
        if not (1e-6 < p < 1.0 - 1e-6):
            return False
    return True


def tie_avoided_instance(seed, n_events=12, margin=1e-3):
    """A small random sequence + model whose selections are margin-safe.

    Redraws deterministically from (seed + 1000*attempt) until the margins
    hold, so gradient checks never straddle a top-k or max-pool tie.
    """
    config = model_mod.MrmConfig(
        n_codes=12, n_features=6, max_features=3, model_dim=8, n_heads=2,
        head_dim=4, topk=2, window_hours=0.5, max_groups=4, max_group_len=4)
    for attempt in range(60):
        s = seed + 1000 * attempt
        rng = np.random.default_rng(s)
        times = np.sort(rng.uniform(0.0, 4.0, size=n_events))
        evs = []
        for t in times:
            cat = [int(c) for c in rng.choice(config.n_features,
                                              size=rng.integers(0, 2),
                                              replace=False)]
            num = []
            if rng.random() < 0.5:
                num = [(int(rng.integers(0, config.n_features)),
                        float(rng.normal()))]
            evs.append(events_mod.ClinicalEvent(int(rng.integers(0, config.n_codes)),
                                                float(t), cat, num))
        seq = events_mod.EventSequence("t", int(rng.integers(0, 2)), evs)
        params = model_mod.MrmParams.init(config, seed=s, kind="mrm")
        if _selection_margins_ok(seq, params, config, margin):
            return seq, params, config
    raise RuntimeError(f"no tie-avoided instance found from seed {seed}")


@pytest.fixture
def make_instance():
    return tie_avoided_instance


# ---------------------------------------------------------------------------
# acceptance criteria reporting: one pass/fail line per criterion in the
# terminal summary, independent of stdout capture

_acceptance_results = []


def record_criterion(number, name, ok, detail=""):
    _acceptance_results.append((number, name, bool(ok), detail))


@pytest.fixture
def acceptance():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, name, ok, detail in sorted(_acceptance_results):
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number} [{status}] {name}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
