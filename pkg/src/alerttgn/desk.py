"""Desk-scale experiment setup shared by the acceptance suite and the scripts.

The full-size defaults in :class:`~alerttgn.config.Config` are far too slow for
a single-CPU numpy run, so the desk setup shrinks widths and raises the
learning rate while keeping every structural choice unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import numcore as F
from .config import Config
from .engine import Engine, partitions_for, train
from .evaluation import EvalReport, evaluate_both
from .events import EventStream, Partitions, SynthSpec, synth_stream

DESK_OVERRIDES = dict(d_node=32, d_time=16, d_msg=32, window=8, lr=1.5e-3, epochs=20)
DESK_SPEC = dict(n_attackers=32, n_victims=60, horizon=2 * 3600.0, late_fraction=0.2, period_spread=4.0)


def desk_config(aggregator: str = "bita", seed: int = 0, **over) -> Config:
    return Config(aggregator=aggregator, seed=seed, **{**DESK_OVERRIDES, **over})


def desk_stream(seed: int = 0, **over) -> EventStream:
    return synth_stream(SynthSpec(**{**DESK_SPEC, **over}), F.Rng(seed).derive(1))


@dataclass
class DeskResult:
    aggregator: str
    seed: int
    best_epoch: int
    epochs_run: int
    reports: dict[str, EvalReport]

    @property
    def transductive(self) -> EvalReport:
        return self.reports["transductive"]

    @property
    def inductive(self) -> EvalReport:
        return self.reports["inductive"]


def desk_run(aggregator: str, seed: int, stream: EventStream | None = None, parts: Partitions | None = None,
             **over) -> DeskResult:
    """Train one aggregator on the desk stream and evaluate both modes on the test partition."""
    cfg = desk_config(aggregator, seed, **over)
    stream = stream if stream is not None else desk_stream(seed)
    parts = parts if parts is not None else partitions_for(cfg, stream)
    engine = Engine.for_stream(cfg, stream, parts.train)
    log = train(engine, parts.train, parts.val)
    return DeskResult(aggregator, seed, log.best_epoch, len(log.epochs), evaluate_both(engine, parts))
