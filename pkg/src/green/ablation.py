"""Paired baseline-vs-GREEN cross-validation over several seeds."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .data import SynthConfig, generate_synthetic
from .training import TrainConfig, cross_validate

ABLATION_DATA = SynthConfig(n_classes=5, feature_dim=16, samples_per_class=400,
                            separation=6.0, noise_p=0.3)
ABLATION_TRAIN = TrainConfig.desk(learning_rate=1e-3, folds=5)


@dataclass
class AblationResult:
    seeds: list
    baseline: list = field(default_factory=list)  # per seed: metric -> fold mean
    green: list = field(default_factory=list)

    def deltas(self, metric: str = "kappa") -> np.ndarray:
        return np.array([g[metric] - b[metric] for b, g in zip(self.baseline, self.green)])

    def improvement(self, metric: str = "kappa") -> float:
        return float(self.deltas(metric).mean())

    def wins(self, metric: str = "kappa") -> int:
        return int((self.deltas(metric) > 0).sum())

    def table(self) -> str:
        lines = [f"{'seed':>4} {'mode':<9}{'kappa':>8}{'accuracy':>10}{'f1':>8}"]
        for s, b, g in zip(self.seeds, self.baseline, self.green):
            for name, m in (("baseline", b), ("green", g)):
                lines.append(f"{s:>4} {name:<9}{m['kappa']:>8.4f}{m['accuracy']:>10.4f}{m['f1']:>8.4f}")
        lines.append(f"mean kappa gain {self.improvement():+.4f}, green wins {self.wins()}/{len(self.seeds)}")
        return "\n".join(lines)


def fold_mean(folds, source: str) -> dict:
    names = folds[0].metrics[source].keys()
    return {k: float(np.mean([f.metrics[source][k] for f in folds])) for k in names}


def run_ablation(seeds: Iterable[int] = range(5), data: SynthConfig = ABLATION_DATA,
                 train: TrainConfig = ABLATION_TRAIN, source: str = "true",
                 progress: Optional[Callable[[str], None]] = None) -> AblationResult:
    """Each seed draws its own dataset and initialisation; both modes share them."""
    result = AblationResult(seeds=list(seeds))
    for s in result.seeds:
        ds = generate_synthetic(dataclasses.replace(data, seed=s))
        for mode, bucket in (("baseline", result.baseline), ("green", result.green)):
            folds = cross_validate(ds, train.replace(mode=mode, seed=s))
            bucket.append(fold_mean(folds, source))
            if progress is not None:
                progress(f"seed {s} {mode}: kappa {bucket[-1]['kappa']:.4f}")
    return result
