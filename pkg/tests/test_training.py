import numpy as np
import pytest
import torch

from gazestab.augmentation import AugmentConfig, blend_corpus
from gazestab.core import GazeError, InsufficientDataError
from gazestab.model import FusedProjection, GazeForecaster, ModelConfig
from gazestab.segmentation import clean_corpus
from gazestab.simulator import SimConfig, simulate_corpus
from gazestab.training import (LossConfig, TrainConfig, build_examples, cosine_lr, grad_check,
                               history_window, l2_penalty, loss_comb, loss_velocity,
                               relative_error, sliding_rollout, split_groups, total_loss, train,
                               write_train_log)

D = torch.float64


def pts(rows):
    return torch.tensor(rows, dtype=D)


class Echo:
    """Forecaster stand-in that repeats the last input point; counts calls."""

    def __init__(self, horizon):
        self.horizon = horizon
        self.calls = 0

    def __call__(self, x, times=None):
        self.calls += 1
        return x[:, -1:].expand(-1, self.horizon, -1)


def test_loss_comb_zero_at_truth():
    truth = torch.randn(10, 2, dtype=D)
    assert loss_comb(truth, truth).item() == 0.0


def test_loss_comb_translation_example():
    truth = torch.randn(12, 2, dtype=D)
    pred = truth + pts([0.1, 0.0])
    assert loss_comb(pred, truth).item() == pytest.approx(0.01 + 0.001 * 0.01, abs=1e-15)


def test_loss_comb_dispersion_example():
    truth = pts([[1, 0], [-1, 0]])
    pred = pts([[2, 0], [-2, 0]])
    assert loss_comb(pred, truth).item() == pytest.approx(1 + 0.05 * 3, abs=1e-15)


def test_loss_comb_nonnegative_and_permutation_invariant_terms():
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        p = torch.randn(9, 2, generator=gen, dtype=D)
        q = torch.randn(9, 2, generator=gen, dtype=D)
        assert loss_comb(p, q) >= 0
        perm = torch.randperm(9, generator=gen)
        no_mse = lambda a: loss_comb(a, q) - ((a - q) ** 2).sum(-1).mean()  # noqa: E731
        assert no_mse(p[perm]).item() == pytest.approx(no_mse(p).item(), abs=1e-12)


def test_loss_comb_shape_mismatch():
    with pytest.raises(GazeError):
        loss_comb(torch.zeros(3, 2), torch.zeros(4, 2))


def test_loss_velocity_examples():
    truth = torch.randn(20, 2, dtype=D)
    assert loss_velocity(truth, truth).item() == 0.0
    assert loss_velocity(truth + 3.0, truth).item() == pytest.approx(0.0, abs=1e-12)
    steps = torch.arange(20, dtype=D)[:, None] * torch.ones(1, 2, dtype=D)
    assert loss_velocity(truth + steps, truth).item() == pytest.approx(2.0)
    # the same drift sampled at 60 Hz is 60 m/s per axis
    assert loss_velocity(truth + steps / 60, truth, dt=1 / 60).item() == pytest.approx(2.0)
    with pytest.raises(InsufficientDataError):
        loss_velocity(truth[:1], truth[:1])


def test_total_loss_endpoints():
    p, q = torch.randn(2, 8, 2, dtype=D), torch.randn(2, 8, 2, dtype=D)
    only_comb = LossConfig(lam=1.0, weight_decay=0.0)
    only_vel = LossConfig(lam=0.0, weight_decay=0.0)
    assert total_loss(p, q, only_comb).item() == pytest.approx(loss_comb(p, q).item())
    assert total_loss(p, q, only_vel).item() == pytest.approx(loss_velocity(p, q).item())


def test_total_loss_l2_term():
    m = GazeForecaster(ModelConfig(d_model=8, n_heads=2, d_ff=8, hist_len=16, horizon=8))
    p, q = torch.zeros(1, 8, 2), torch.zeros(1, 8, 2)
    cfg = LossConfig(weight_decay=1e-3)
    assert total_loss(p, q, cfg, m).item() == pytest.approx(1e-3 * l2_penalty(m).item(), rel=1e-6)


def test_rollout_call_counts():
    hist = torch.randn(2, 64, 4)
    for window, calls in ((16, 4), (24, 3), (64, 1)):
        echo = Echo(64)
        out = sliding_rollout(echo, hist, window, 64, hist_len=64)
        assert echo.calls == calls and out.shape == (2, 64, 4)


def test_rollout_echo_constant():
    hist = torch.randn(64, 4)
    out = sliding_rollout(Echo(64), hist, 16, 64, hist_len=64)
    torch.testing.assert_close(out, hist[-1:].expand(64, -1))


def test_rollout_feeds_predictions_back():
    seen = []

    class Spy(Echo):
        def __call__(self, x, times=None):
            seen.append(x.clone())
            return x[:, -1:].expand(-1, self.horizon, -1) + 1.0

    hist = torch.zeros(1, 8, 1)
    out = sliding_rollout(Spy(4), hist, 2, 4, hist_len=8)
    assert out.flatten().tolist() == [1.0, 1.0, 2.0, 2.0]
    assert seen[1][0, -2:].flatten().tolist() == [1.0, 1.0]


def test_rollout_errors():
    with pytest.raises(GazeError):
        sliding_rollout(Echo(8), torch.zeros(1, 8, 4), 0, 8, hist_len=8)
    with pytest.raises(InsufficientDataError):
        sliding_rollout(Echo(8), torch.zeros(1, 4, 4), 2, 8, hist_len=8)


def test_cosine_schedule():
    assert cosine_lr(100, 1e-3, 100) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(50, 1e-3, 100) == pytest.approx(5e-4)
    assert cosine_lr(1, 1e-3, 100) < 1e-3


@pytest.fixture(scope="module")
def corpus():
    kept, _ = clean_corpus(simulate_corpus(SimConfig(n_trials=40, rng_seed=2)))
    return blend_corpus(kept, AugmentConfig(rng_seed=2))


def test_history_window_pads_and_times(corpus):
    trial = corpus[0]
    feats, times = history_window(trial, 200)
    assert feats.shape == (200, 4)
    assert times[-1] == pytest.approx(-1 / 60) and times[0] == pytest.approx(-200 / 60)
    k = trial.fixation_onset
    np.testing.assert_array_equal(feats[-1], trial.features()[k - 1])
    np.testing.assert_array_equal(feats[0], trial.features()[0])


def test_build_examples_targets(corpus):
    ex = build_examples(corpus, 64, 96)
    assert ex.history.shape == (len(corpus), 96, 4) and ex.target.shape == (len(corpus), 64, 2)
    k = corpus[3].fixation_onset
    np.testing.assert_allclose(ex.target[3].numpy(), corpus[3].positions()[k:k + 64], atol=1e-6)


def test_split_groups_keeps_twins_together(corpus):
    ex = build_examples(corpus, 64, 96)
    tr, va = split_groups(ex.groups, 0.25, 0)
    assert not {ex.groups[i] for i in tr} & {ex.groups[i] for i in va}
    assert sorted(tr + va) == list(range(len(ex)))


SMALL_M = ModelConfig(d_model=8, n_heads=2, d_ff=8, hist_len=16, horizon=16)
SMALL_T = TrainConfig(epochs=3, batch_size=16, window=8, hist_buffer=24)


def test_train_deterministic(corpus, tmp_path):
    a = train(corpus, SMALL_M, SMALL_T)
    b = train(corpus, SMALL_M, SMALL_T)
    assert [vars(e) for e in a.log] == [vars(e) for e in b.log]
    write_train_log(tmp_path / "a.csv", a.log)
    write_train_log(tmp_path / "b.csv", b.log)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_loss,lr,alpha"


def test_train_returns_best_epoch(corpus):
    res = train(corpus, SMALL_M, TrainConfig(epochs=6, batch_size=16, window=8, hist_buffer=24,
                                             patience=2))
    vals = [e.val_loss for e in res.log]
    assert res.best_val == min(vals)
    assert res.best_epoch == vals.index(min(vals)) + 1
    assert len(res.log) <= 6


def test_train_needs_one_batch(corpus):
    with pytest.raises(GazeError):
        train(corpus[:4], SMALL_M, TrainConfig(batch_size=64))


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9) <= 1e-3
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_zero_loss_point_has_zero_mse_gradient():
    pred = torch.randn(8, 2, dtype=D, requires_grad=True)
    loss = loss_comb(pred, pred.detach())
    loss.backward()
    assert torch.all(pred.grad == 0)


def test_alpha_gradient_matches_contraction():
    proj = FusedProjection(ModelConfig(d_model=8, n_heads=2)).double()
    y = torch.randn(2, 6, 8, dtype=D)
    target = torch.randn(2, 6, 4, dtype=D)
    out = proj(y)
    loss = ((out - target) ** 2).sum()
    grad_out = torch.autograd.grad(loss, out, retain_graph=True)[0]
    loss.backward()
    attn, lin = proj.branches(y)
    a = proj.alpha.item()
    expected = a * (1 - a) * ((attn - lin) * grad_out).sum().item()
    assert proj.raw_alpha.grad.item() == pytest.approx(expected, rel=1e-10)


def test_grad_check_passes_on_small_model():
    kept, _ = clean_corpus(simulate_corpus(SimConfig(n_trials=6, rng_seed=0)))
    ex = build_examples(kept, 8, 24)
    torch.manual_seed(0)
    model = GazeForecaster(ModelConfig(d_model=8, n_heads=2, d_ff=8, hist_len=16, horizon=8))
    report = grad_check(model, ex.history, ex.times, ex.target, window=4, n_coords=210)
    assert report.n_checked >= 200
    assert set(report.per_group) == {"token_conv", "time_proj", "predict_linear", "backbone",
                                     "mha", "linear_proj", "alpha"}
    assert report.passed, report.summary()


def test_grad_check_reports_offenders():
    kept, _ = clean_corpus(simulate_corpus(SimConfig(n_trials=2, rng_seed=0)))
    ex = build_examples(kept, 8, 24)
    model = GazeForecaster(ModelConfig(d_model=8, n_heads=2, d_ff=8, hist_len=16, horizon=8))
    report = grad_check(model, ex.history, ex.times, ex.target, window=4, n_coords=20,
                        tolerance=0.0)
    assert not report.passed and "OFFENDER" in report.summary()
