"""Seen / unseen style-transfer evaluation over speaker pairs."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from typing import Sequence

import numpy as np

from .data import DatasetManifest, NormalizationStats, Sample
from .inference import extract_style, transfer
from .metrics import DEFAULT_WRISTS, DistanceReport, distance_report, metrics_report
from .model import ZSMSTM


@dataclass
class PairResult:
    source: str
    target: str
    report: DistanceReport

    def model_share(self, metric: str) -> float:
        return self.report.model_pct[metric]


def evaluate_transfer(model: ZSMSTM, stats: NormalizationStats, samples: dict[str, Sequence[Sample]],
                      pairs: Sequence[tuple[str, str]] | None = None, fps: float = 15.0,
                      wrists: Sequence[int] = DEFAULT_WRISTS,
                      style_samples: dict[str, Sequence[Sample]] | None = None) -> list[PairResult]:
    """For each (source, target) pair, transfer all source intervals to the target style.

    ``samples`` maps speaker -> raw (data-unit) intervals used for ground-truth
    metrics and as transfer sources; target styles are averaged over
    ``style_samples`` (defaults to ``samples``).
    """
    style_samples = style_samples or samples
    speakers = list(samples)
    pairs = pairs if pairs is not None else list(permutations(speakers, 2))
    truth = {s: metrics_report([x.pose for x in samples[s]], fps, wrists=wrists).mean() for s in speakers}
    styles = {s: extract_style(model, style_samples[s], stats) for s in {t for _, t in pairs}}
    results = []
    for src, tgt in pairs:
        preds = transfer(model, list(samples[src]), styles[tgt], stats)
        pred_metrics = metrics_report(preds, fps, wrists=wrists).mean()
        results.append(PairResult(src, tgt, distance_report(truth[src], truth[tgt], pred_metrics)))
    return results


def load_split_samples(manifest: DatasetManifest, speakers: Sequence[str], split: str) -> dict[str, list[Sample]]:
    return {s: manifest.load(s, split) for s in speakers}


def pass_rate(results: Sequence[PairResult], metrics: Sequence[str], threshold: float = 50.0) -> float:
    if not results:
        return float("nan")
    ok = [all(r.model_share(m) < threshold for m in metrics) for r in results]
    return float(np.mean(ok))
