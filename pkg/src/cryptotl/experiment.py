"""Synthetic transfer-learning sweep: fine-tuned frozen features versus training from scratch.

Runs entirely in plaintext. The frozen stack is evaluated with the plaintext twin of the
encrypted circuit, which is what the client would decrypt up to CKKS noise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .data import DomainPair, make_domain_pair, subsample
from .errors import UsageError
from .he_layers import plaintext_frozen_forward

METHODS = ("cryptotl", "scratch")


@dataclass(frozen=True)
class SweepRow:
    fraction: float  # percent of the target training set
    method: str
    seed: int
    accuracy: float


def parse_fractions(text: str) -> list:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"fractions must be comma-separated numbers, got {text!r}") from None
    if not values:
        raise UsageError("at least one fraction is required")
    for v in values:
        if not 0 < v <= 100:
            raise UsageError(f"fraction {v} is outside (0, 100]")
    return values


def tl_curve(fractions, seeds: int, seed: int = 0, pair: DomainPair | None = None,
             config: nn.TrainConfig | None = None) -> list:
    """Per-seed accuracies for both methods at each target fraction (in percent)."""
    for v in fractions:
        if not 0 < v <= 100:
            raise UsageError(f"fraction {v} is outside (0, 100]")
    if seeds < 1:
        raise UsageError("seeds must be at least 1")
    config = config or nn.TrainConfig(seed=seed)
    pair = pair if pair is not None else make_domain_pair(seed)
    width = pair.source_x.shape[1]
    spec = nn.server_spec(width)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        source = nn.train_source(pair.source_x, pair.source_y, spec, config)
    frozen = nn.frozen_weights(source.state, spec)
    feats = plaintext_frozen_forward(pair.target_x, frozen)
    test_feats = plaintext_frozen_forward(pair.test_x, frozen)
    cspec = nn.client_spec(frozen.out_width)
    index = np.arange(len(pair.target_y))[:, None]

    rows = []
    for frac in fractions:
        for k in range(seeds):
            s = seed + k
            run = replace(config, seed=s)
            idx, y = subsample(index, pair.target_y, frac / 100.0, s)
            idx = idx[:, 0]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                tl = nn.finetune_client(feats[idx], y, cspec, run)
                scratch = nn.train_source(pair.target_x[idx], y, spec, run)
            rows.append(SweepRow(frac, "cryptotl", s, nn.accuracy(tl.state, cspec, test_feats, pair.test_y)))
            rows.append(SweepRow(frac, "scratch", s,
                                 nn.accuracy(scratch.state, spec, pair.test_x, pair.test_y)))
    return rows


def summarize(rows) -> list:
    """(fraction, method, mean, std, n) per fraction and method, in input order."""
    groups = {}
    for r in rows:
        groups.setdefault((r.fraction, r.method), []).append(r.accuracy)
    return [(f, m, float(np.mean(a)), float(np.std(a)), len(a)) for (f, m), a in groups.items()]


__all__ = ["METHODS", "SweepRow", "parse_fractions", "summarize", "tl_curve"]
