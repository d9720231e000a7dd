"""Shared fixtures.

The trained toy denoiser is expensive (a few minutes on one core), so it is
trained once and cached under tests/_cache; delete that directory to force
a retrain. Everything else is cheap enough to build per session.
"""

import json
from pathlib import Path

import pytest
import torch

from gsedit.denoiser import ToyDenoiser, TrainingSet, train_toy_denoiser
from gsedit.diffusion import build_schedule
from gsedit.pipeline import (PatchCodec, StyleClassifier, depth_to_latent_grid,
                             generate_synthetic_dataset)

CACHE_DIR = Path(__file__).parent / "_cache"

DATASET_SEED = 100
TRAIN_STEPS = 4000
TRAIN_SEED = 0


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def sched():
    return build_schedule(1000, 50)


@pytest.fixture(scope="session")
def dataset():
    return generate_synthetic_dataset(seed=DATASET_SEED, num_scenes=24,
                                      views_per_scene=12)


@pytest.fixture(scope="session")
def codec(dataset):
    c = PatchCodec()
    c.fit_whitening([img for rec in dataset for img in rec.images])
    return c


@pytest.fixture(scope="session")
def training_set(dataset, codec):
    latents, labels, depths = [], [], []
    for rec in dataset:
        for v in range(rec.images.shape[0]):
            latents.append(codec.encode(rec.images[v]))
            labels.append(rec.label)
            depths.append(depth_to_latent_grid(rec.depths[v], rec.alphas[v], (16, 16)))
    return TrainingSet(latents=torch.stack(latents),
                       labels=torch.tensor(labels, dtype=torch.long),
                       depths=torch.stack(depths))


@pytest.fixture(scope="session")
def classifier(dataset):
    clf = StyleClassifier()
    clf.fit([img for rec in dataset for img in rec.images],
            [rec.label for rec in dataset for _ in range(rec.images.shape[0])])
    return clf


@pytest.fixture(scope="session")
def trained(training_set, sched):
    """(model, training report) — trained once, then loaded from the cache."""
    ckpt = CACHE_DIR / f"denoiser_s{DATASET_SEED}_n{TRAIN_STEPS}"
    report_file = ckpt / "training_report.json"
    if report_file.exists():
        model = ToyDenoiser.load_checkpoint(ckpt)
        report = json.loads(report_file.read_text())
        return model, report
    model, report = train_toy_denoiser(training_set, sched, num_steps=TRAIN_STEPS,
                                       seed=TRAIN_SEED)
    model.save_checkpoint(ckpt)
    slim = {k: report[k] for k in ("val_eps_mse", "baseline_eps_mse", "num_steps")}
    report_file.write_text(json.dumps(slim, indent=1))
    return model, slim
