"""Frozen-feature activity recognition: stratified k-fold CV with an MLP probe.

Features come from a pretrained discriminator trunk (see models.extract_features)
and are never fine-tuned here; only the small probe is trained per fold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import synthdata
from .errors import ConfigurationError, ParameterError
from .models import extract_features, load_checkpoint


def kfold_split(n: int, labels, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Stratified k-fold assignment: returns k disjoint index arrays covering range(n).

    Each class is shuffled and dealt round-robin, with the starting fold
    rotated per class so remainders spread across folds.
    """
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ParameterError(f"labels must have shape ({n},), got {labels.shape}")
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    if n < k:
        raise ConfigurationError(f"cannot make {k} folds from {n} samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    folds: list[list[int]] = [[] for _ in range(k)]
    for rank, cls in enumerate(np.unique(labels)):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise ConfigurationError(f"class {cls} has {len(members)} members, fewer than k={k}")
        rng.shuffle(members)
        for j, idx in enumerate(members):
            folds[(rank + j) % k].append(int(idx))
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


@dataclass
class ProbeConfig:
    hidden: int = 256
    epochs: int = 50
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 64
    seed: int = 0


class Probe:
    """A trained 2-layer MLP plus the feature statistics it was fit with."""

    def __init__(self, model: nn.Module, mean: np.ndarray, std: np.ndarray):
        self.model = model
        self.mean = mean
        self.std = std

    def _standardize(self, features: np.ndarray) -> torch.Tensor:
        return torch.as_tensor((features - self.mean) / self.std, dtype=torch.float32)

    def logits(self, features: np.ndarray) -> np.ndarray:
        self.model.eval()
        with torch.inference_mode():
            return self.model(self._standardize(features)).numpy().copy()

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1).astype(np.int64)


def train_probe(features: np.ndarray, labels: np.ndarray, config: ProbeConfig | None = None) -> Probe:
    """Fit the probe on (features, labels); features are standardized internally."""
    config = config or ProbeConfig()
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(features) != len(labels):
        raise ParameterError(f"bad probe inputs: features {features.shape}, labels {labels.shape}")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ConfigurationError(f"probe training needs >= 2 classes, got {classes.tolist()}")
    n_classes = int(labels.max()) + 1

    # float64 statistics: raw trunk activations can be large enough that
    # squaring them overflows float32
    wide = features.astype(np.float64)
    mean = wide.mean(axis=0)
    std = np.maximum(wide.std(axis=0), 1e-6)
    x = torch.as_tensor((wide - mean) / std, dtype=torch.float32)
    y = torch.as_tensor(labels)

    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = nn.Sequential(
            nn.Linear(features.shape[1], config.hidden),
            nn.ReLU(),
            nn.Linear(config.hidden, n_classes),
        )
    opt = torch.optim.Adam(model.parameters(), lr=config.lr,
                           betas=(config.adam_beta1, config.adam_beta2))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            idx = torch.as_tensor(order[start:start + config.batch_size])
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return Probe(model, mean, std)


def top1_accuracy(predictions, truth) -> float:
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape or predictions.ndim != 1:
        raise ParameterError(f"prediction/truth shape mismatch: {predictions.shape} vs {truth.shape}")
    if len(truth) == 0:
        raise ParameterError("cannot score an empty prediction set")
    return float((predictions == truth).mean())


@dataclass
class EvalReport:
    fold_accuracies: list[float]
    mean: float
    std: float
    n_samples: int
    feature_dim: int
    k: int
    seed: int
    checkpoint: str | None = None
    probe: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def evaluate_features(features: np.ndarray, labels: np.ndarray, k: int = 5,
                      seed: int = 0, probe_config: ProbeConfig | None = None) -> EvalReport:
    """Stratified k-fold CV of the probe on fixed features."""
    base = probe_config or ProbeConfig()
    folds = kfold_split(len(features), labels, k=k, seed=seed)
    accuracies = []
    for i, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(features)), test_idx)
        fold_cfg = ProbeConfig(**{**asdict(base),
                                  "seed": int(np.random.SeedSequence([seed, 17, i]).generate_state(1)[0])})
        probe = train_probe(features[train_idx], labels[train_idx], fold_cfg)
        accuracies.append(top1_accuracy(probe.predict(features[test_idx]), labels[test_idx]))
    arr = np.array(accuracies)
    return EvalReport(
        fold_accuracies=[float(a) for a in accuracies],
        mean=float(arr.mean()), std=float(arr.std()),
        n_samples=len(features), feature_dim=features.shape[1],
        k=k, seed=seed, probe=asdict(base),
    )


def evaluate(checkpoint, manifest: synthdata.DatasetManifest, seed: int = 0,
             probe_config: ProbeConfig | None = None) -> EvalReport:
    """Extract frozen features for the labeled splits and cross-validate the probe."""
    payload = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    xs, ys = [], []
    for split in ("probe_train", "probe_test"):
        clips, labels = synthdata.load_split(manifest, split)
        if len(clips):
            xs.append(extract_features(payload, clips))
            ys.append(labels)
    if not xs:
        raise ConfigurationError("manifest has no labeled clips to evaluate on")
    features = np.concatenate(xs)
    labels = np.concatenate(ys)
    report = evaluate_features(features, labels, k=5, seed=seed, probe_config=probe_config)
    if not isinstance(checkpoint, dict):
        report.checkpoint = str(checkpoint)
    return report
