import numpy as np
import pytest

from gazestab.augmentation import AugmentConfig, blend_corpus, source_id, synthesize_trial
from gazestab.core import GazeError, GazeSample, Trial, TrialStateError
from gazestab.segmentation import clean_corpus
from gazestab.simulator import SimConfig, simulate_corpus


@pytest.fixture(scope="module")
def corpus():
    kept, _ = clean_corpus(simulate_corpus(SimConfig(n_trials=30, rng_seed=5)))
    return kept


def test_contraction_hand_value():
    samples = [GazeSample(0.0, (0.0, 0.0)), GazeSample(1 / 60, (0.9, 0.9))] + \
              [GazeSample(i / 60, (1.2, 1.4)) for i in range(2, 14)]
    trial = Trial("h", (1.0, 1.0), samples, plane_extent=(4.0, 4.0), fixation_onset=1)
    syn = synthesize_trial(trial, 0.5)
    assert syn.samples[2].pos == pytest.approx((1.1, 1.2), abs=1e-15)


def test_fixed_point_at_target():
    samples = [GazeSample(i / 60, (0.3, 0.3)) for i in range(20)]
    trial = Trial("f", (0.3, 0.3), samples, fixation_onset=2)
    for beta in (0.1, 0.5, 0.9):
        syn = synthesize_trial(trial, beta)
        assert all(s.pos == (0.3, 0.3) for s in syn.samples)


def test_contraction_identity_and_copy(corpus):
    for trial in corpus:
        syn = synthesize_trial(trial, 0.4)
        k = trial.fixation_onset
        g = np.asarray(trial.target)
        assert syn.samples[:k + 1] == trial.samples[:k + 1]
        src = trial.positions()[k + 1:]
        out = syn.positions()[k + 1:]
        np.testing.assert_allclose(np.linalg.norm(out - g, axis=1),
                                   0.4 * np.linalg.norm(src - g, axis=1), atol=1e-9)


def test_dispersion_shrinks_by_beta(corpus):
    trial = corpus[0]
    k = trial.fixation_onset
    g = np.asarray(trial.target)
    syn = synthesize_trial(trial, 0.3)
    sd_src = np.std(np.linalg.norm(trial.positions()[k + 1:] - g, axis=1))
    sd_syn = np.std(np.linalg.norm(syn.positions()[k + 1:] - g, axis=1))
    assert sd_syn == pytest.approx(0.3 * sd_src, rel=1e-9)


def test_velocity_identity(corpus):
    trial = corpus[1]
    syn = synthesize_trial(trial, 0.5)
    pos = syn.positions()
    k = trial.fixation_onset
    for t in range(k + 1, len(syn)):
        expected = np.linalg.norm(pos[t] - pos[t - 1]) * 60.0
        assert syn.samples[t].lin_speed == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_synthetic_metadata(corpus):
    syn = synthesize_trial(corpus[0], 0.25)
    assert syn.extra["synthetic"] is True and syn.extra["beta"] == 0.25
    assert syn.id.endswith("#syn") and source_id(syn) == corpus[0].id
    assert syn.extra["ang_speed_method"] == "beta_scaled"


def test_ang_speed_from_gaze_origin():
    samples = [GazeSample(i / 60, (0.05 * (i % 2), 0.0), gaze_origin=(0.0, 0.0, 0.0))
               for i in range(20)]
    trial = Trial("o", (0.0, 0.0), samples, fixation_onset=3)
    syn = synthesize_trial(trial, 0.5)
    assert syn.extra["ang_speed_method"] == "ray_lift"
    expected = np.degrees(np.arctan(0.025 / 3.0)) * 60
    assert syn.samples[10].ang_speed == pytest.approx(expected, rel=1e-9)


def test_literal_formula_flag():
    samples = [GazeSample(i / 60, (0.5, 0.5)) for i in range(20)]
    trial = Trial("l", (0.2, 0.2), samples, fixation_onset=0)
    syn = synthesize_trial(trial, 0.5, literal_formula=True)
    assert syn.samples[5].pos == pytest.approx((0.45, 0.45))


def test_synthesize_errors(corpus):
    with pytest.raises(TrialStateError):
        synthesize_trial(corpus[0].with_onset(None), 0.5)
    for beta in (0.0, 1.0, -0.2):
        with pytest.raises(GazeError):
            synthesize_trial(corpus[0], beta)


def test_blend_ratio_zero(corpus):
    out = blend_corpus(corpus, AugmentConfig(blend_ratio=0.0, rng_seed=1))
    assert sorted(t.id for t in out) == sorted(t.id for t in corpus)


def test_blend_half():
    real = clean_corpus(simulate_corpus(SimConfig(n_trials=100, rng_seed=2)))[0]
    out = blend_corpus(real, AugmentConfig(blend_ratio=0.5, rng_seed=3))
    syn = [t for t in out if t.extra.get("synthetic")]
    assert len(out) == 200 and len(syn) == 100
    assert len({source_id(t) for t in syn}) == 100


def test_blend_fraction_within_one_trial(corpus):
    for ratio in (0.1, 0.3, 0.7, 0.9):
        out = blend_corpus(corpus, AugmentConfig(blend_ratio=ratio, rng_seed=0))
        s = sum(bool(t.extra.get("synthetic")) for t in out)
        exact = ratio * len(corpus) / (1 - ratio)
        assert abs(s - exact) <= 1
        assert len({t.id for t in out}) == len(out)


def test_blend_deterministic(corpus):
    cfg = AugmentConfig(rng_seed=11)
    a = [t.id for t in blend_corpus(corpus, cfg)]
    b = [t.id for t in blend_corpus(corpus, cfg)]
    c = [t.id for t in blend_corpus(corpus, AugmentConfig(rng_seed=12))]
    assert a == b and a != c


def test_blend_errors():
    with pytest.raises(GazeError):
        blend_corpus([], AugmentConfig())
    with pytest.raises(GazeError):
        AugmentConfig(beta=1.0)
    with pytest.raises(GazeError):
        AugmentConfig(blend_ratio=1.5)
