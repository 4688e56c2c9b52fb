import numpy as np
import pytest

from nowcast.dataset import StormSpec, synthesize_storms
from nowcast.fields import FieldSequence, PrecipField
from nowcast.model import ModelConfig


def blob(n, cx, cy, sigma, amp=30.0):
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    return amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma * sigma))


def translated_blob_sequence(n=64, frames=3, shift=(2.0, 0.0), sigma=6.0, amp=30.0, center=None):
    """Analytic rigid translation: frame t is the blob centred at c + t*shift."""
    cx, cy = center or ((n - 1) / 2 - shift[0] * (frames - 1) / 2, (n - 1) / 2 - shift[1] * (frames - 1) / 2)
    return FieldSequence(tuple(
        PrecipField(blob(n, cx + t * shift[0], cy + t * shift[1], sigma, amp), t * 600) for t in range(frames)
    ))


@pytest.fixture
def tiny_model():
    return ModelConfig(context_frames=4, horizon=4, channels=8, embed_dim=4, reduc_factor=4,
                       dropout=0.0, evolver_depth=1, evolver_dim=8, lead_time_classes=18)


@pytest.fixture
def storm():
    return synthesize_storms(StormSpec(n=32, frames=10, flow=(1.0, 0.5), sigma=(4.0, 5.0), margin=8.0), seed=3)


# --- shared toy training runs (n=32, a few seconds per hundred steps) ---------

TOY_MODEL = ModelConfig(context_frames=4, horizon=9, channels=16, evolver_dim=16, evolver_depth=2, dropout=0.0)


@pytest.fixture(scope="session")
def toy_data():
    from nowcast.benchmark import BenchmarkConfig, make_corpus
    from nowcast.dataset import sample_windows
    from nowcast.flow import FlowConfig
    from nowcast.training import TrainingSet

    cfg = BenchmarkConfig(events=30, frames_per_event=14, flow_mean=(1.0, 0.5), model=TOY_MODEL,
                          storm=StormSpec(n=32, amplitude=(20.0, 60.0), sigma=(3.0, 5.0),
                                          growth=(0.03, 0.06), margin=6.0))
    sequences, manifest = make_corpus(cfg)
    windows = {s: list(sample_windows(manifest, sequences, 4, TOY_MODEL.horizon, s)) for s in ("train", "test")}
    return {s: TrainingSet.from_windows(w, FlowConfig()) for s, w in windows.items()}


@pytest.fixture(scope="session")
def toy_ved(toy_data):
    from nowcast.training import train_ved

    # lr 1e-3: the unit-scale runs are 200 steps; the benchmark keeps the 1e-4 default
    return train_ved(toy_data["train"], TOY_MODEL, steps=200, lr=1e-3, seed=0)


@pytest.fixture(scope="session")
def toy_evolver(toy_data, toy_ved):
    from nowcast.training import train_evolver

    return train_evolver(toy_data["train"], TOY_MODEL, toy_ved.params, steps=200, lr=3e-3, seed=1)
