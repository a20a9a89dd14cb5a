import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ohubert.augment import (AugmentPolicy, ImpulseResponse, mix_gain, mix_utterances, reverberate,
                             rir_envelope, synth_rir, two_stage_augment)
from ohubert.corpus import Waveform, make_batch


def _loop_mix(x, s, snr_db, start, length):
    e_p = sum(x[start + i] ** 2 for i in range(length)) / length
    e_s = sum(s[i] ** 2 for i in range(length)) / length
    g = math.sqrt(e_p / e_s / 10 ** (snr_db / 10))
    out = list(x)
    for i in range(length):
        out[start + i] = x[start + i] + g * s[i]
    return np.array(out), g


def _loop_conv(x, h):
    y = np.zeros(len(x))
    for n in range(len(x)):
        acc = 0.0
        for k in range(min(n + 1, len(h))):
            acc += h[k] * x[n - k]
        y[n] = acc
    return y


def test_mix_matches_direct_loop_and_hits_snr(rng):
    x = rng.standard_normal(400)
    s = rng.standard_normal(300)
    out = mix_utterances(Waveform(x, 16000), Waveform(s, 16000), 3.7, (50, 200))
    ref, g = _loop_mix(x, s, 3.7, 50, 200)
    assert np.max(np.abs(out.samples - ref)) < 1e-6
    added = out.samples[50:250] - x[50:250]
    snr = 10 * np.log10(np.sum(x[50:250] ** 2) / np.sum(added ** 2))
    assert abs(snr - 3.7) < 1e-6
    np.testing.assert_array_equal(out.samples[:50], x[:50])
    np.testing.assert_array_equal(out.samples[250:], x[250:])


@given(snr=st.floats(-20, 30), seed=st.integers(0, 2 ** 16), length=st.integers(1, 200))
@settings(max_examples=80, deadline=None)
def test_mix_snr_property(snr, seed, length):
    r = np.random.default_rng(seed)
    x = r.standard_normal(256)
    s = r.standard_normal(length) + 0.1
    start = int(r.integers(256 - length + 1))
    out = mix_utterances(Waveform(x, 8000), Waveform(s, 8000), snr, (start, length))
    noise = out.samples[start:start + length] - x[start:start + length]
    achieved = 10 * np.log10(np.sum(x[start:start + length] ** 2) / np.sum(noise ** 2))
    assert abs(achieved - snr) < 1e-6


def test_mix_errors():
    x = Waveform(np.ones(10), 100)
    with pytest.raises(ValueError, match="zero energy"):
        mix_gain(np.ones(4), np.zeros(4), 0.0)
    with pytest.raises(ValueError, match="outside"):
        mix_utterances(x, x, 0.0, (5, 10))
    assert mix_utterances(x, x, 0.0, (3, 0)).samples.tolist() == x.samples.tolist()


def test_reverberation_matches_direct_convolution(rng):
    x = rng.standard_normal(300)
    h = synth_rir(0.01, 16000, seed=4)
    out = reverberate(Waveform(x, 16000), h)
    ref = _loop_conv(x, h.taps)
    ref *= np.max(np.abs(x)) / np.max(np.abs(ref))
    assert np.max(np.abs(out.samples - ref)) < 1e-5


def test_delta_impulse_is_identity(rng):
    x = rng.standard_normal(500)
    out = reverberate(Waveform(x, 16000), ImpulseResponse(np.array([1.0]), 16000, 0.0))
    np.testing.assert_allclose(out.samples, x, atol=1e-12)


def test_rir_shape_and_envelope():
    h = synth_rir(0.3, 16000, seed=0)
    assert len(h.taps) == math.ceil(1.5 * 0.3 * 16000)
    assert h.taps[0] == 1.0
    # -60 dB of amplitude at rt60: the envelope hits 1e-3 there
    assert rir_envelope(0.3 * 16000, 0.3, 16000) == pytest.approx(1e-3)
    np.testing.assert_array_equal(synth_rir(0.3, 16000, 7).taps, synth_rir(0.3, 16000, 7).taps)
    with pytest.raises(ValueError):
        synth_rir(0.0, 16000, 0)


def test_reverb_rejects_rate_mismatch():
    with pytest.raises(ValueError, match="sample rate"):
        reverberate(Waveform(np.ones(8), 8000), synth_rir(0.01, 16000, 0))


@pytest.mark.parametrize("n", [2, 3, 4])
def test_exactly_half_of_each_batch_is_reverberated(tiny_data, n):
    for seed in range(10):
        b = make_batch(tiny_data["manifest"], n, 640, seed, audio=tiny_data["audio"])
        out = two_stage_augment(b, AugmentPolicy(), seed=seed)
        assert out.reverberated.sum() == n
        assert out.samples.shape == b.samples.shape
        assert np.isfinite(out.samples).all()


def test_augment_is_seeded(tiny_data):
    b = make_batch(tiny_data["manifest"], 3, 640, 0, audio=tiny_data["audio"])
    a1 = two_stage_augment(b, AugmentPolicy(), seed=[1, 2])
    a2 = two_stage_augment(b, AugmentPolicy(), seed=[1, 2])
    a3 = two_stage_augment(b, AugmentPolicy(), seed=[1, 3])
    np.testing.assert_array_equal(a1.samples, a2.samples)
    assert not np.array_equal(a1.samples, a3.samples)


def test_augment_needs_two_sources(tiny_data):
    b = make_batch(tiny_data["manifest"], 1, 640, 0, audio=tiny_data["audio"])
    with pytest.raises(ValueError, match="single source"):
        two_stage_augment(b, AugmentPolicy())


def test_policy_validation():
    with pytest.raises(ValueError, match="lo > hi"):
        AugmentPolicy(mix_snr_range_db=(5, 0))
    with pytest.raises(ValueError):
        AugmentPolicy(mix_region_fraction_range=(0.5, 1.5))
    with pytest.raises(ValueError):
        AugmentPolicy(rt60_range_s=(0.0, 0.2))
