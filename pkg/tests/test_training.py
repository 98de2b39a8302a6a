import hashlib
import math

import numpy as np
import pytest
import torch

from m3lab import pyramid
from m3lab.data import Batch, TensorData
from m3lab.model import ModelConfig, ToyLMM
from m3lab.tasks import TaskConfig, generate_dataset
from m3lab.training import (
    TrainConfig,
    TrainingError,
    batch_loss,
    draw_scales,
    frozen_names,
    make_optimizer,
    multiscale_loss,
    train,
    train_step,
)

TASK = TaskConfig(grid=6, patch=2, colors=3, glyphs=3)
TINY = ModelConfig.for_task(TASK, width=8, heads=2, layers=2, channels=4, max_seq=48)


@pytest.fixture(scope="module")
def data():
    train_set, _ = generate_dataset(0, {"global-color": 12, "local-glyph": 12},
                                    {"global-color": 1, "local-glyph": 1}, TASK)
    return TensorData(train_set, TASK)


def fresh(seed=0, double=False):
    m = ToyLMM(TINY, seed=seed)
    return m.double() if double else m


def test_multiscale_loss_is_mean_of_scales(data):
    m = fresh(double=True)
    b = data.batch([0])
    pyr = m.pyramid(b.images[0])
    per_scale = [m.nll(pyramid.flatten(s), b.questions[0], b.answers[0]).item() for s in pyr.scales]
    got = multiscale_loss(m, pyr, b.questions[0], b.answers[0]).item()
    assert got == pytest.approx(sum(per_scale) / len(per_scale), rel=1e-12)


def test_multiscale_loss_simple_means():
    class Fake:
        def __init__(self, values):
            self.values = iter(values)

        def nll(self, *_):
            return torch.tensor(next(self.values))

    pyr = pyramid.TokenPyramid((np.zeros((1, 1, 1)), np.zeros((2, 2, 1))))
    assert multiscale_loss(Fake([1.0, 3.0]), pyr, None, None).item() == 2.0
    assert multiscale_loss(Fake([0.7, 0.7]), pyr, None, None).item() == pytest.approx(0.7)
    with pytest.raises(ValueError):
        multiscale_loss(Fake([]), pyramid.TokenPyramid(()), None, None)


def test_multiscale_gradient_is_mean_of_scale_gradients(data):
    m = fresh(seed=1, double=True)
    b = data.batch([3])
    q, a = b.questions[0], b.answers[0]
    params = [p for _, p in m.named_parameters()]

    def grads(loss):
        return torch.cat([g.flatten() for g in torch.autograd.grad(loss, params, allow_unused=False)])

    total = grads(multiscale_loss(m, m.pyramid(b.images[0]), q, a))
    scales = []
    for i in range(len(m.cfg.schedule)):
        pyr = m.pyramid(b.images[0])
        scales.append(grads(m.nll(pyramid.flatten(pyr.scales[i]), q, a)))
    mean = torch.stack(scales).mean(0)
    torch.testing.assert_close(total, mean, rtol=1e-6, atol=1e-12)


def test_batch_loss_average_is_sample_mean(data):
    m = fresh(double=True)
    b = data.batch([0, 1, 2])
    whole = batch_loss(m, b, "average").item()
    single = [batch_loss(m, data.batch([i]), "average").item() for i in range(3)]
    assert whole == pytest.approx(np.mean(single), rel=1e-12)


def test_random_mode_uses_drawn_scales(data):
    m = fresh(double=True)
    b = data.batch(np.arange(6))
    got = batch_loss(m, b, "random", np.random.default_rng(5)).item()
    picks = draw_scales(np.random.default_rng(5), len(m.cfg.schedule), 6)
    expected = []
    for i, s in enumerate(picks):
        pyr = m.pyramid(b.images[i])
        expected.append(m.nll(pyramid.flatten(pyr.scales[s]), b.questions[i], b.answers[i]).item())
    assert got == pytest.approx(np.mean(expected), rel=1e-12)


def test_uniform_scale_draws():
    draws = draw_scales(np.random.default_rng(0), 4, 10_000)
    sd = math.sqrt(10_000 * 0.25 * 0.75)
    counts = np.bincount(draws, minlength=4)
    assert np.all(np.abs(counts - 2500) <= 3 * sd)


def test_zero_step_size_is_null_update(data):
    m = fresh()
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    cfg = TrainConfig(lr=0.0)
    train_step(m, make_optimizer(m, cfg), data.batch([0, 1]), cfg, np.random.default_rng(0))
    for n, p in m.named_parameters():
        assert torch.equal(p, before[n]), n


def test_frozen_set():
    m = fresh()
    frozen = frozen_names(m, "encoder-projector")
    assert all(not n.startswith(("encoder", "projector")) for n in frozen)
    assert {"tok_emb.weight", "pos_emb.weight", "head.weight", "ln_f.weight"} <= set(frozen)
    assert frozen_names(m, "all") == []


def _hash(m, names):
    h = hashlib.sha256()
    for n, p in m.named_parameters():
        if n in names:
            h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def test_frozen_parameters_unchanged_after_100_steps(data):
    cfg = TrainConfig(trainable="encoder-projector", steps=100, batch_size=4, lr=1e-2)
    m = fresh()
    names = set(frozen_names(m, cfg.trainable))
    before = _hash(m, names)
    enc_before = m.encoder.weight.detach().clone()
    m, _ = train(data, cfg, model=m)
    assert _hash(m, names) == before
    assert not torch.equal(enc_before, m.encoder.weight)


def test_one_step_matches_manual_adam(data):
    cfg = TrainConfig(lr=1e-2, beta1=0.8, beta2=0.95, eps=1e-6)
    m = fresh(seed=2, double=True)
    b = data.batch([4])
    m.zero_grad()
    batch_loss(m, b, "average").backward()
    grads = {n: p.grad.detach().clone() for n, p in m.named_parameters()}
    start = {n: p.detach().clone() for n, p in m.named_parameters()}
    m2 = fresh(seed=2, double=True)
    train_step(m2, make_optimizer(m2, cfg), b, cfg, np.random.default_rng(0))
    for n, p in m2.named_parameters():
        g = grads[n]
        mom = (1 - cfg.beta1) * g / (1 - cfg.beta1)
        vel = (1 - cfg.beta2) * g * g / (1 - cfg.beta2)
        expected = start[n] - cfg.lr * mom / (vel.sqrt() + cfg.eps)
        torch.testing.assert_close(p.detach(), expected, rtol=1e-10, atol=1e-12)


def test_non_finite_loss_aborts(data):
    m = fresh()
    with torch.no_grad():
        m.head.bias[0] = float("nan")
    cfg = TrainConfig()
    with pytest.raises(TrainingError, match="non-finite"):
        train_step(m, make_optimizer(m, cfg), data.batch([0]), cfg, np.random.default_rng(0))


def test_zero_steps_returns_initial(data):
    m, hist = train(data, TrainConfig(steps=0), TINY)
    ref = fresh(seed=0)
    assert hist == []
    for (n, p), (_, q) in zip(m.named_parameters(), ref.named_parameters()):
        assert torch.equal(p, q), n


@pytest.mark.parametrize("mode", ["average", "random"])
def test_training_deterministic_and_finite(data, mode):
    cfg = TrainConfig(mode=mode, steps=6, init_steps=2, batch_size=5, lr=1e-3)
    a, ha = train(data, cfg, TINY)
    b, hb = train(data, cfg, TINY)
    assert [r["loss"] for r in ha] == [r["loss"] for r in hb]
    assert all(math.isfinite(r["loss"]) for r in ha)
    assert [r["phase"] for r in ha] == ["init"] * 2 + ["multiscale"] * 6
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_eval_hook_called_on_interval(data):
    calls = []
    cfg = TrainConfig(steps=5, batch_size=2, eval_every=2)
    _, hist = train(data, cfg, TINY, evaluate=lambda m: calls.append(1) or {"x": 1.0})
    assert [r["step"] for r in hist if "accuracy" in r] == [2, 4, 5]


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(TensorData([], TASK), TrainConfig(steps=1), TINY)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="sometimes")
    with pytest.raises(ValueError):
        TrainConfig(trainable="head")
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    assert TrainConfig.from_mapping({"lr": "0.01", "steps": "3", "mode": "random"}).steps == 3
    with pytest.raises(ValueError):
        TrainConfig.from_mapping({"momentum": "0.9"})


def test_batch_len():
    b = Batch(torch.zeros(3, 2, 2, 1), torch.zeros(3, 1), torch.zeros(3, 1))
    assert len(b) == 3
