"""Shared helpers: in-memory synthetic scans with linearly encoded targets."""

import numpy as np
import pytest

from physio_recon.dataset_io import Scan


def bandlimited_noise(rng, n, dt, low=0.01, high=0.15):
    """White noise restricted to [low, high] Hz, z-normalized."""
    spec = np.fft.rfft(rng.normal(size=n))
    freqs = np.fft.rfftfreq(n, dt)
    spec[(freqs < low) | (freqs > high)] = 0.0
    v = np.fft.irfft(spec, n=n)
    return (v - v.mean()) / v.std()


def draw_encoding(rng, n_roi, lag_max=3):
    """Dataset-level ROI encoding: per-ROI gains and causal FIR kernels."""
    enc = []
    for _ in range(n_roi):
        enc.append(
            (
                rng.normal(),
                rng.normal(size=rng.integers(1, lag_max + 1)),
                rng.normal(),
                rng.normal(size=rng.integers(1, lag_max + 1)),
            )
        )
    return enc


def make_linear_scan(rng, encoding, scan_id, subject_id, age, t_len=60, noise=0.1,
                     dt=1.44, prep_hash="test-prep"):
    """One scan whose ROI channels are lagged linear mixes of the two targets."""
    rv = bandlimited_noise(rng, t_len, dt)
    hr = bandlimited_noise(rng, t_len, dt)
    roi = np.empty((t_len, len(encoding)))
    for i, (a, h, b, g) in enumerate(encoding):
        sig = a * np.convolve(rv, h)[:t_len] + b * np.convolve(hr, g)[:t_len]
        sig = sig + noise * sig.std() * rng.normal(size=t_len)
        roi[:, i] = (sig - sig.mean()) / sig.std()
    return Scan(
        scan_id=scan_id,
        subject_id=subject_id,
        age=age,
        roi=roi,
        rv=rv,
        hr=hr,
        dt=dt,
        prep_hash=prep_hash,
        roi_names=tuple(f"roi_{i}" for i in range(len(encoding))),
    )


def make_linear_scans(n_subjects, scans_per_subject=1, seed=0, n_roi=8, lag_max=3, **kwargs):
    rng = np.random.default_rng(seed)
    encoding = draw_encoding(rng, n_roi, lag_max)
    ages = np.sort(rng.uniform(36, 89, size=n_subjects))
    scans = []
    for i in range(n_subjects):
        for j in range(scans_per_subject):
            scans.append(
                make_linear_scan(rng, encoding, f"s{i:03d}_r{j}", f"subj{i:03d}", float(ages[i]), **kwargs)
            )
    return scans


@pytest.fixture
def linear_scans():
    return make_linear_scans(n_subjects=8, seed=11)
