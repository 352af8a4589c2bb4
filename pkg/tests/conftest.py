"""Shared test helpers: the finite-difference gradient oracle and small
model/corpus factories."""

from __future__ import annotations

import numpy as np
import pytest

from scdlab.encoder import ModelConfig


def finite_difference_check(
    loss_fn,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    names: list[str],
    rng: np.random.Generator,
    n_coords: int = 100,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> int:
    """Compare analytic gradients against central finite differences on
    randomly drawn parameter coordinates (64-bit arithmetic).

    ``loss_fn`` must recompute the scalar loss from the current contents of
    ``params``; coordinates are perturbed in place and restored.
    """
    checked = 0
    for _ in range(n_coords):
        name = names[int(rng.integers(0, len(names)))]
        arr = params[name]
        idx = np.unravel_index(int(rng.integers(0, arr.size)), arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        loss_plus = loss_fn()
        arr[idx] = orig - h
        loss_minus = loss_fn()
        arr[idx] = orig
        numeric = (loss_plus - loss_minus) / (2.0 * h)
        analytic = grads[name][idx]
        denom = max(abs(numeric), abs(analytic), 1e-6)
        rel = abs(numeric - analytic) / denom
        assert rel <= tol, f"{name}{idx}: analytic {analytic:.8g} vs numeric {numeric:.8g} (rel {rel:.3g})"
        checked += 1
    return checked


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        input_dim=6,
        n_languages=2,
        model_dim=8,
        n_layers=2,
        n_heads=2,
        chunk_frames=3,
        vocab_size=5,
        seed=0,
        conv_channels=(2, 2),
        ff_dim=12,
    )


def random_log_posteriors(rng: np.random.Generator, T: int, V: int) -> np.ndarray:
    """A valid (row-normalized) log posterior matrix."""
    logits = rng.standard_normal((T, V)) * 2.0
    logits -= logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return logits - lse
