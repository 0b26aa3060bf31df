import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from birads_net.model import ModelOutputs
from gradcheck import gradient_check
from birads_net.objective import LossWeights, TargetBatch, agreement_loss, task_loss, total_loss


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_default_weights():
    w = LossWeights()
    assert w.task == (0.2, 0.2, 0.2, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1, 0.2, 0.5)
    assert w.agreement == 0.2
    with pytest.raises(ValueError):
        LossWeights(task=(0.1,) * 10)
    with pytest.raises(ValueError):
        LossWeights(agreement=-1)


def test_task1_cross_entropy_example():
    loss = task_loss(1, t([[0.5, 0.3, 0.2]]), t([[1, 0, 0]]))
    assert float(loss) == pytest.approx(-math.log(0.5), abs=1e-12)
    assert float(loss) == pytest.approx(0.6931, abs=1e-4)


def test_task10_exact_prediction():
    assert float(task_loss(10, t([0.30]), t([0.30]))) == 0.0


def test_task11_clamped():
    loss = float(task_loss(11, t([[1 - 1e-7, 1e-7]]), t([[1, 0]])))
    assert math.isfinite(loss)
    assert loss == pytest.approx(1e-7, rel=1e-3)
    assert math.isfinite(float(task_loss(11, t([[0.0, 1.0]]), t([[1, 0]]))))


def test_subtype_binary_cross_entropy():
    loss = float(task_loss(6, t([0.8, 0.3]), t([1.0, 0.0])))
    assert loss == pytest.approx(-(math.log(0.8) + math.log(0.7)) / 2)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        task_loss(4, t([[0.5, 0.5]]), t([[1, 0, 0, 0, 0, 0]]))
    with pytest.raises(ValueError):
        task_loss(12, t([0.1]), t([0.1]))


def test_agreement_examples():
    assert float(agreement_loss(t([0.3]), t([0.8]), t([0.3]), t([1.0]))) == pytest.approx(0.04, abs=1e-15)
    assert float(agreement_loss(t([0.3]), t([1.0]), t([0.3]), t([1.0]))) == 0.0
    assert float(agreement_loss(t([0.6]), t([0.6]), t([0.2]), t([0.2]))) == 0.0


def _targets():
    return TargetBatch(
        shape=t([[1, 0, 0], [0, 0, 1]]),
        orientation=t([[1, 0], [0, 1]]),
        margin=t([[1, 0], [0, 1]]),
        echo=t([[1, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 0]]),
        posterior=t([[1, 0, 0, 0], [0, 0, 1, 0]]),
        subtypes=t([[0, 0, 0, 0], [1, 0, 0, 1]]),
        likelihood=t([0.01, 0.975]),
        tumor=t([[1, 0], [0, 1]]),
    )


def _outputs_equal_to(targets):
    return ModelOutputs(**{k: v.clone() for k, v in targets.__dict__.items()})


def test_perfect_predictions_give_zero():
    targets = _targets()
    br = total_loss(_outputs_equal_to(targets), targets)
    for value in br.to_record().values():
        assert value == pytest.approx(0.0, abs=1e-6)


def test_only_task1_imperfect():
    targets = _targets()
    out = _outputs_equal_to(targets)
    out.shape = t([[0.5, 0.3, 0.2], [0.2, 0.3, 0.5]])
    br = total_loss(out, targets)
    l1 = -math.log(0.5)
    assert float(br.tasks[0]) == pytest.approx(l1, abs=1e-12)
    # the clamped one-hot components contribute ~1e-7 each
    assert float(br.total) == pytest.approx(0.2 * l1, abs=1e-5)
    assert float(br.total) == pytest.approx(0.1386, abs=1e-4)


def _random_batch(rng, n):
    def probs(k):
        p = rng.random((n, k)) + 0.05
        return t(p / p.sum(1, keepdims=True))

    def onehot(k):
        return t(np.eye(k)[rng.integers(k, size=n)])

    out = ModelOutputs(probs(3), probs(2), probs(2), probs(6), probs(4), t(rng.random((n, 4))), t(rng.random(n)), probs(2))
    tgt = TargetBatch(onehot(3), onehot(2), onehot(2), onehot(6), onehot(4), t(rng.integers(2, size=(n, 4)) * 1.0), t(rng.random(n)), onehot(2))
    return out, tgt


def _reference_total(out, tgt, w):
    """Scalar re-derivation of the weighted sum with plain numpy."""
    def ce(p, y):
        p = np.clip(p, 1e-7, 1 - 1e-7)
        return float(np.mean(-(y * np.log(p)).sum(1)))

    o = {k: v.numpy() for k, v in out.__dict__.items()}
    y = {k: v.numpy() for k, v in tgt.__dict__.items()}
    parts = [ce(o[n], y[n]) for n in ("shape", "orientation", "margin", "echo", "posterior")]
    for j in range(4):
        p = np.clip(o["subtypes"][:, j], 1e-7, 1 - 1e-7)
        q = y["subtypes"][:, j]
        parts.append(float(np.mean(-(q * np.log(p) + (1 - q) * np.log(1 - p)))))
    parts.append(float(np.mean((o["likelihood"] - y["likelihood"]) ** 2)))
    parts.append(ce(o["tumor"], y["tumor"]))
    agree = float(np.mean((np.abs(o["tumor"][:, 1] - o["likelihood"]) - np.abs(y["tumor"][:, 1] - y["likelihood"])) ** 2))
    return sum(wi * li for wi, li in zip(w.task, parts)) + w.agreement * agree


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 9))
def test_decomposition_matches_reference(seed, n):
    rng = np.random.default_rng(seed)
    out, tgt = _random_batch(rng, n)
    w = LossWeights(tuple(rng.random(11)), float(rng.random()))
    br = total_loss(out, tgt, w)
    assert float(br.total) == pytest.approx(_reference_total(out, tgt, w), abs=1e-6)
    recomposed = sum(wi * float(li) for wi, li in zip(w.task, br.tasks)) + w.agreement * float(br.agreement)
    assert float(br.total) == pytest.approx(recomposed, abs=1e-6)
    assert all(float(li) >= 0 for li in br.tasks) and float(br.agreement) >= 0


def test_linear_in_weights():
    rng = np.random.default_rng(0)
    out, tgt = _random_batch(rng, 5)
    base = LossWeights()
    doubled = LossWeights(base.task[:10] + (2 * base.task[10],), base.agreement)
    b1, b2 = total_loss(out, tgt, base), total_loss(out, tgt, doubled)
    assert float(b2.total - b1.total) == pytest.approx(base.task[10] * float(b1.tasks[10]), abs=1e-12)


def test_record_has_thirteen_scalars():
    rng = np.random.default_rng(1)
    rec = total_loss(*_random_batch(rng, 3)).to_record()
    assert len(rec) == 13
    assert all(v is not None for v in rec.values())


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check_mini_model(seed):
    errors, _ = gradient_check(n_params=100, seed=seed)
    assert len(errors) == 100
    assert errors.max() < 1e-3, errors.max()
