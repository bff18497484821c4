"""Cross-entropy and self-critical training loops, and corpus evaluation."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .data import Batch, CaptioningExample, collate
from .decoding import Hypothesis, ModelStepper, caption_batch, greedy_decode, sample_decode
from .metrics import CiderD, CiderStats, CorpusEntry, bleu, cider_d, rouge_l
from .model import BOS, PAD, GliedDecoder

PHASES = ("xe", "scst")


class DataError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 80
    max_epochs: int = 25
    lr: float = 1e-4
    patience: int = 5
    seed: int = 0
    phase: str = "xe"
    clip_norm: float = 5.0
    temperature: float = 1.0
    val_beam: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr <= 0:
            raise ValueError("batch_size, max_epochs and lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    cider: float | None = None
    bleu4: float | None = None
    wall_ms: float = 0.0
    reward: float | None = None


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_cider: float | None = None
    checkpoint: str | None = None

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_jsonl(self) -> str:
        lines = []
        for e in self.epochs:
            rec = {"epoch": e.epoch, "loss": _r6(e.loss), "cider": _r6(e.cider), "bleu4": _r6(e.bleu4),
                   "wall_ms": _r6(e.wall_ms)}
            if e.reward is not None:
                rec["reward"] = _r6(e.reward)
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"


def _r6(x):
    return None if x is None else round(float(x), 6)


def batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def encode_batch(model: GliedDecoder, batch: Batch, training: bool = False, rng=None):
    return model.encode(batch.regions, batch.region_mask, batch.attributes, batch.attr_mask, training, rng)


def xe_loss(model: GliedDecoder, batch: Batch, training: bool = False, rng=None) -> ag.Tensor:
    src = encode_batch(model, batch, training, rng)
    logits = model.forward(batch.inputs, src, training, rng)
    b, t, v = logits.shape
    return ag.cross_entropy(ag.reshape(logits, (b * t, v)), batch.targets.reshape(-1), PAD)


# ---------------------------------------------------------------------------
# evaluation


def decode_examples(model: GliedDecoder, examples: Sequence[CaptioningExample], beam: int = 1,
                    batch_size: int = 100) -> list[Hypothesis]:
    out = []
    with ag.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            src = encode_batch(model, collate(chunk))
            out.extend(caption_batch(model, src, beam))
    return out


def evaluate(model: GliedDecoder, examples: Sequence[CaptioningExample], vocab, beam: int = 3) -> tuple[dict, list[str]]:
    """Decode every example and score against its references."""
    hyps = decode_examples(model, examples, beam)
    texts = [" ".join(vocab.decode(h.words)) for h in hyps]
    corpus = [CorpusEntry(ex.image_id, t.split(), ex.references) for ex, t in zip(examples, texts)]
    b = bleu(corpus)
    metrics = {f"BLEU-{i + 1}": b[i] for i in range(4)}
    metrics["ROUGE-L"] = rouge_l(corpus)
    metrics["CIDEr-D"] = cider_d(corpus)[0]
    return metrics, texts


# ---------------------------------------------------------------------------
# cross-entropy


def train_cross_entropy(model: GliedDecoder, train: Sequence[CaptioningExample], config: TrainConfig,
                        val: Sequence[CaptioningExample] | None = None, vocab=None,
                        on_epoch: Callable[[EpochRecord], None] | None = None,
                        early_stopping: bool = True) -> TrainReport:
    """Teacher-forced training on every (image, reference) pair.

    With a validation set, greedy CIDEr-D is measured each epoch; training
    stops after ``patience`` epochs without improvement and the best
    parameters are restored.
    """
    if not train:
        raise DataError("training set is empty")
    if val and vocab is None:
        raise ValueError("validation needs the vocabulary to detokenize captions")
    pairs = [(ex, cap) for ex in train for cap in ex.caption_ids]
    rng = np.random.default_rng(config.seed)
    opt = ag.Adam(model.parameters(), lr=config.lr)
    report = TrainReport()
    best_snap = None
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for bi, idx in enumerate(batches(len(pairs), config.batch_size, rng)):
            chosen = [pairs[i] for i in idx]
            batch = collate([p[0] for p in chosen], [p[1] for p in chosen])
            try:
                loss = xe_loss(model, batch, True, rng)
            except ag.NonFiniteError as err:
                raise ag.TrainingError(f"epoch {epoch} batch {bi}: {err}") from err
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except ag.TrainingError as err:
                raise ag.TrainingError(f"epoch {epoch} batch {bi}: {err}") from err
            total += loss.item() * len(idx)
            count += len(idx)
        rec = EpochRecord(epoch, total / count)
        if val:
            metrics, _ = evaluate(model, val, vocab, beam=config.val_beam)
            rec.cider, rec.bleu4 = metrics["CIDEr-D"], metrics["BLEU-4"]
        rec.wall_ms = (time.perf_counter() - t0) * 1000.0
        report.epochs.append(rec)
        if on_epoch:
            on_epoch(rec)
        if val:
            if report.best_cider is None or rec.cider > report.best_cider:
                report.best_cider, report.best_epoch = rec.cider, epoch
                best_snap = model.snapshot()
                stale = 0
            else:
                stale += 1
                if early_stopping and stale >= config.patience:
                    break
    if best_snap is not None:
        model.restore(best_snap)
    else:
        report.best_epoch = report.epochs[-1].epoch
    return report


# ---------------------------------------------------------------------------
# self-critical training


class CiderReward:
    """CIDEr-D against each training image's references, df from the training corpus."""

    def __init__(self, examples: Sequence[CaptioningExample], vocab):
        self.vocab = vocab
        refs = {ex.image_id: ex.references for ex in examples}
        if any(not r for r in refs.values()):
            raise DataError("an image has no references; reward undefined")
        self.scorer = CiderD(CiderStats(list(refs.values())))
        self._ref_vecs = {i: [self.scorer.stats.vectorize(r) for r in rs] for i, rs in refs.items()}

    def __call__(self, image_id: str, ids: Sequence[int]) -> float:
        refs = self._ref_vecs.get(image_id)
        if not refs:
            raise DataError(f"no references for image {image_id!r}; reward undefined")
        hyp = self.scorer.stats.vectorize(self.vocab.decode(ids))
        return 10.0 * sum(self.scorer._sim(hyp, r) for r in refs) / len(refs)


def _sequence_batch(hyps: Sequence[Hypothesis]) -> tuple[np.ndarray, np.ndarray]:
    t = max(len(h.tokens) for h in hyps)
    inputs = np.full((len(hyps), t), PAD, dtype=np.int64)
    targets = np.full((len(hyps), t), PAD, dtype=np.int64)
    for i, h in enumerate(hyps):
        seq = [BOS] + h.tokens
        inputs[i, :len(seq) - 1] = seq[:-1]
        targets[i, :len(h.tokens)] = h.tokens
    return inputs, targets


def scst_loss(model: GliedDecoder, batch: Batch, samples: Sequence[Hypothesis], rewards: np.ndarray) -> ag.Tensor:
    """-(1/B) sum_i r_i * sum_t log p(sample_i,t); computed without dropout."""
    inputs, targets = _sequence_batch(samples)
    src = encode_batch(model, batch)
    logits = model.forward(inputs, src)
    b, t, v = logits.shape
    lp = ag.token_log_probs(ag.reshape(logits, (b * t, v)), np.where(targets == PAD, 0, targets).reshape(-1))
    weights = (-(rewards[:, None] * (targets != PAD)) / b).reshape(-1)
    return ag.sum_(ag.mul(lp, weights))


def scst_step(model: GliedDecoder, examples: Sequence[CaptioningExample], optimizer: ag.Adam,
              reward: CiderReward, rng: np.random.Generator, clip_norm: float = 5.0,
              temperature: float = 1.0) -> dict:
    """One self-critical update: sampled caption vs greedy baseline, CIDEr-D advantage."""
    batch = collate(examples)
    max_len = model.config.max_len
    with ag.no_grad():
        src = encode_batch(model, batch)
        samples = sample_decode(ModelStepper(model, src), temperature, rng, max_len)
        greedy = greedy_decode(ModelStepper(model, src), max_len)
    r_sample = np.array([reward(ex.image_id, h.words) for ex, h in zip(examples, samples)])
    r_greedy = np.array([reward(ex.image_id, h.words) for ex, h in zip(examples, greedy)])
    advantage = r_sample - r_greedy
    loss = scst_loss(model, batch, samples, advantage)
    optimizer.zero_grad()
    loss.backward()
    grad_norm = ag.clip_grad_norm(optimizer.params, clip_norm)
    optimizer.step()
    return {"loss": loss.item(), "reward": float(advantage.mean()), "sample_cider": float(r_sample.mean()),
            "greedy_cider": float(r_greedy.mean()), "grad_norm": grad_norm}


def train_scst(model: GliedDecoder, train: Sequence[CaptioningExample], config: TrainConfig, vocab,
               val: Sequence[CaptioningExample] | None = None,
               on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainReport:
    """Self-critical fine-tuning.  Early stopping picks the best SCST epoch on
    validation CIDEr-D; the starting parameters are not a candidate."""
    if not train:
        raise DataError("training set is empty")
    rng = np.random.default_rng(config.seed)
    opt = ag.Adam(model.parameters(), lr=config.lr)
    reward = CiderReward(train, vocab)
    report = TrainReport()
    best_snap = None
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        adv, total, n = 0.0, 0.0, 0
        for idx in batches(len(train), config.batch_size, rng):
            stats = scst_step(model, [train[i] for i in idx], opt, reward, rng, config.clip_norm,
                              config.temperature)
            adv += stats["reward"] * len(idx)
            total += stats["loss"] * len(idx)
            n += len(idx)
        rec = EpochRecord(epoch, loss=total / n, reward=adv / n)
        if val:
            metrics, _ = evaluate(model, val, vocab, beam=config.val_beam)
            rec.cider, rec.bleu4 = metrics["CIDEr-D"], metrics["BLEU-4"]
        rec.wall_ms = (time.perf_counter() - t0) * 1000.0
        report.epochs.append(rec)
        if on_epoch:
            on_epoch(rec)
        if val:
            if report.best_cider is None or rec.cider > report.best_cider:
                report.best_cider, report.best_epoch = rec.cider, epoch
                best_snap = model.snapshot()
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if best_snap is not None:
        model.restore(best_snap)
    return report
