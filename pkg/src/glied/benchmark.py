"""Synthetic ablation benchmark: base vs GLIED over several seeds, plus SCST.

Each (variant, seed) cell generates the seed's dataset, trains with
cross-entropy under validation early stopping, decodes the test split with
beam 3, and scores CIDEr-D and the grammar slot accuracies.  GLIED cells can
additionally run self-critical fine-tuning and record validation CIDEr-D
before and after.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .data import SYNTH_D_R, structured_score, synth_generate
from .model import GliedDecoder, ModelConfig
from .training import TrainConfig, evaluate, train_cross_entropy, train_scst


@dataclass
class BenchmarkConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    variants: tuple[str, ...] = ("base", "glied")
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    noise_sigma: float = 0.1
    d_h: int = 32
    n_heads: int = 4
    d_f: int = 64
    dropout: float = 0.1
    max_len: int = 28
    batch_size: int = 80
    epochs: int = 25
    lr: float = 1e-3
    patience: int = 5
    test_beam: int = 3
    scst_variant: str | None = "glied"
    scst_epochs: int = 2
    scst_lr: float = 1e-5
    scst_batch_size: int = 40

    def model_config(self, variant: str, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_e=self.d_h, d_h=self.d_h, n_heads=self.n_heads, d_f=self.d_f,
                           d_r=SYNTH_D_R, dropout=self.dropout, max_len=self.max_len).with_variant(variant)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["variants"] = list(self.variants)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        d["seeds"] = tuple(d.get("seeds", cls.seeds))
        d["variants"] = tuple(d.get("variants", cls.variants))
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class CellResult:
    variant: str
    seed: int
    best_epoch: int
    val_cider: float
    test: dict[str, float]
    structured: dict[str, float]
    train_seconds: float
    scst_pre_val: float | None = None
    scst_post_val: float | None = None


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    cells: list[CellResult] = field(default_factory=list)

    def cell_values(self, variant: str, key: str) -> list[float]:
        out = []
        for c in self.cells:
            if c.variant != variant:
                continue
            if key in c.test:
                out.append(c.test[key])
            elif key in c.structured:
                out.append(c.structured[key])
            else:
                out.append(getattr(c, key))
        return out

    def summary(self) -> dict:
        out = {}
        for v in self.config.variants:
            row = {}
            for key in ("CIDEr-D", "BLEU-4", "ROUGE-L", "objects", "attributes", "relations", "count"):
                row[key] = mean_se(self.cell_values(v, key))
            out[v] = row
        scst = [c for c in self.cells if c.scst_pre_val is not None]
        if scst:
            out["scst"] = {"pre_val": mean_se([c.scst_pre_val for c in scst]),
                           "post_val": mean_se([c.scst_post_val for c in scst])}
        return out

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "cells": [dataclasses.asdict(c) for c in self.cells],
                "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkResult":
        return cls(BenchmarkConfig.from_dict(d["config"]), [CellResult(**c) for c in d["cells"]])


def mean_se(values: Sequence[float]) -> dict:
    """Mean and standard error (sample standard deviation / sqrt n)."""
    n = len(values)
    mean = sum(values) / n
    sd = math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0
    return {"mean": mean, "se": sd / math.sqrt(n), "n": n}


def run_cell(cfg: BenchmarkConfig, variant: str, seed: int, log: Callable[[str], None] | None = None) -> CellResult:
    ds = synth_generate(seed, cfg.n_train, cfg.n_val, cfg.n_test, cfg.noise_sigma)
    model = GliedDecoder(cfg.model_config(variant, len(ds.vocab)), seed=seed)
    t0 = time.perf_counter()
    tc = TrainConfig(batch_size=cfg.batch_size, max_epochs=cfg.epochs, lr=cfg.lr, patience=cfg.patience, seed=seed)
    report = train_cross_entropy(model, ds.train, tc, ds.val, ds.vocab)
    pre = post = None
    if variant == cfg.scst_variant and cfg.scst_epochs > 0:
        pre = report.best_cider
        sc = TrainConfig(batch_size=cfg.scst_batch_size, max_epochs=cfg.scst_epochs, lr=cfg.scst_lr,
                         patience=cfg.patience, seed=seed, phase="scst")
        post = train_scst(model, ds.train, sc, ds.vocab, ds.val).best_cider
    seconds = time.perf_counter() - t0
    metrics, texts = evaluate(model, ds.test, ds.vocab, beam=cfg.test_beam)
    structured = structured_score(texts, [ds.scenes[e.image_id] for e in ds.test])
    cell = CellResult(variant, seed, report.best_epoch, report.best_cider, metrics, structured, seconds, pre, post)
    if log:
        extra = f" scst {pre:.4f}->{post:.4f}" if pre is not None else ""
        log(f"{variant} seed={seed} epoch={cell.best_epoch} val={cell.val_cider:.4f} "
            f"test={metrics['CIDEr-D']:.4f} count={structured['count']:.3f} "
            f"relations={structured['relations']:.3f}{extra} ({seconds:.0f}s)")
    return cell


def run_benchmark(cfg: BenchmarkConfig, cache: str | Path | None = None,
                  log: Callable[[str], None] | None = None) -> BenchmarkResult:
    """Run every (variant, seed) cell.  With ``cache``, finished cells are
    stored in that JSON file and reused when the config fingerprint matches."""
    done: dict[tuple[str, int], CellResult] = {}
    cache = Path(cache) if cache else None
    if cache and cache.exists():
        stored = json.loads(cache.read_text())
        if stored.get("fingerprint") == cfg.fingerprint():
            for c in stored["cells"]:
                done[(c["variant"], c["seed"])] = CellResult(**c)
    result = BenchmarkResult(cfg)
    for seed in cfg.seeds:
        for variant in cfg.variants:
            cell = done.get((variant, seed))
            if cell is None:
                cell = run_cell(cfg, variant, seed, log)
                done[(variant, seed)] = cell
                if cache:
                    cache.write_text(json.dumps({"fingerprint": cfg.fingerprint(),
                                                 "cells": [dataclasses.asdict(c) for c in done.values()]}, indent=1))
            elif log:
                log(f"{variant} seed={seed} reused from {cache}")
            result.cells.append(cell)
    return result
