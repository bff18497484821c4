"""Greedy, sampled and beam-search generation.

Decoders talk to a *stepper*: any object with ``begin()``, ``advance(state,
tokens)`` returning ``(logits, state)``, and ``select(state, rows)``, plus the
attributes ``vocab_size``, ``bos_id``, ``eos_id`` (may be None) and
``banned_ids``.  :class:`ModelStepper` adapts a :class:`GliedDecoder`.

Scores are sums of full-vocabulary log-softmax values.  Banned ids (PAD and
BOS for the caption model) are never emitted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import log_softmax_np, no_grad
from .model import BOS, EOS, PAD, DecoderState, GliedDecoder, Sources


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)
    logprob: float = 0.0
    finished: bool = False
    capped: bool = False

    @property
    def words(self) -> list[int]:
        """Generated ids without the trailing EOS."""
        return self.tokens[:-1] if self.finished else list(self.tokens)


class ModelStepper:
    def __init__(self, model: GliedDecoder, src: Sources):
        self.model = model
        self.src = src
        self.vocab_size = model.config.vocab_size
        self.bos_id = BOS
        self.eos_id = EOS
        self.banned_ids = (PAD, BOS)

    def begin(self):
        return DecoderState(), self.src

    def advance(self, state, tokens):
        dstate, src = state
        with no_grad():
            logits, dstate = self.model.step(tokens, dstate, src)
        return logits.data, (dstate, src)

    def select(self, state, rows):
        dstate, src = state
        return dstate.select(rows), src.select(rows)

    @property
    def batch(self) -> int:
        return self.src.batch


def _masked_logp(stepper, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logp = log_softmax_np(logits, -1)
    pick = logp.copy()
    if stepper.banned_ids:
        pick[:, list(stepper.banned_ids)] = -np.inf
    return logp, pick


def greedy_decode(stepper, max_len: int) -> list[Hypothesis]:
    """Argmax decoding for every row of the stepper's batch; ties go to the lowest id."""
    state = stepper.begin()
    n = getattr(stepper, "batch", 1)
    hyps = [Hypothesis() for _ in range(n)]
    active = np.arange(n)
    tokens = np.full(n, stepper.bos_id)
    for _ in range(max_len):
        logits, state = stepper.advance(state, tokens)
        logp, pick = _masked_logp(stepper, logits)
        choice = pick.argmax(axis=-1)
        keep = []
        for row, (h_idx, tok) in enumerate(zip(active, choice)):
            h = hyps[h_idx]
            h.tokens.append(int(tok))
            h.logprob += float(logp[row, tok])
            if stepper.eos_id is not None and tok == stepper.eos_id:
                h.finished = True
            else:
                keep.append(row)
        if not keep:
            break
        if len(keep) < len(active):
            state = stepper.select(state, np.array(keep))
        active = active[keep]
        tokens = choice[keep]
    else:
        for h_idx in active:
            hyps[h_idx].capped = True
    return hyps


def sample_decode(stepper, temperature: float, rng: np.random.Generator, max_len: int) -> list[Hypothesis]:
    """Draw one caption per row from softmax(logits / temperature)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    state = stepper.begin()
    n = getattr(stepper, "batch", 1)
    hyps = [Hypothesis() for _ in range(n)]
    active = np.arange(n)
    tokens = np.full(n, stepper.bos_id)
    for _ in range(max_len):
        logits, state = stepper.advance(state, tokens)
        logp = log_softmax_np(logits, -1)
        scaled = logits / temperature
        if stepper.banned_ids:
            scaled[:, list(stepper.banned_ids)] = -np.inf
        probs = np.exp(log_softmax_np(scaled, -1))
        cdf = np.cumsum(probs, axis=-1)
        u = rng.random(len(active)) * cdf[:, -1]
        choice = np.minimum((cdf <= u[:, None]).sum(axis=-1), logits.shape[1] - 1)
        keep = []
        for row, (h_idx, tok) in enumerate(zip(active, choice)):
            h = hyps[h_idx]
            h.tokens.append(int(tok))
            h.logprob += float(logp[row, tok])
            if stepper.eos_id is not None and tok == stepper.eos_id:
                h.finished = True
            else:
                keep.append(row)
        if not keep:
            break
        if len(keep) < len(active):
            state = stepper.select(state, np.array(keep))
        active = active[keep]
        tokens = choice[keep]
    else:
        for h_idx in active:
            hyps[h_idx].capped = True
    return hyps


def beam_search(stepper, beam: int, max_len: int, length_normalize: bool = False) -> list[Hypothesis]:
    """Length-synchronous beam search for a single source; best hypothesis first.

    Finished hypotheses are retired into a pool capped at ``beam``.  An EOS
    expansion is only retired when it ranks inside the top ``beam``
    candidates, which makes ``beam=1`` coincide with greedy decoding.
    Without length normalization the search stops as soon as the best live
    hypothesis scores below the worst retired one (scores only fall).
    """
    if beam < 1:
        raise ValueError("beam size must be at least 1")
    state = stepper.begin()
    live = [Hypothesis()]
    pool: list[Hypothesis] = []
    eos = stepper.eos_id

    def rank_key(h: Hypothesis):
        score = h.logprob / max(len(h.tokens), 1) if length_normalize else h.logprob
        return (-score, h.tokens)

    for _ in range(max_len):
        last = np.array([h.tokens[-1] if h.tokens else stepper.bos_id for h in live])
        logits, state = stepper.advance(state, last)
        logp, pick = _masked_logp(stepper, logits)
        totals = np.array([h.logprob for h in live])[:, None] + pick
        flat = totals.ravel()
        n_cand = min(2 * beam, int(np.isfinite(flat).sum()))
        if n_cand == 0:
            break
        cutoff = np.partition(flat, -n_cand)[-n_cand]
        idx = np.flatnonzero(flat >= cutoff)
        cands = []
        for i in idx:
            li, tok = divmod(int(i), flat.size // len(live))
            cands.append((Hypothesis(live[li].tokens + [tok], live[li].logprob + float(logp[li, tok])), li))
        cands.sort(key=lambda c: rank_key(c[0]))
        new_live, rows = [], []
        for rank, (h, li) in enumerate(cands):
            if eos is not None and h.tokens[-1] == eos:
                if rank < beam:
                    h.finished = True
                    pool.append(h)
            else:
                new_live.append(h)
                rows.append(li)
            if len(new_live) == beam:
                break
        pool.sort(key=rank_key)
        del pool[beam:]
        if not new_live:
            live = []
            break
        if not length_normalize and len(pool) >= beam and new_live[0].logprob < pool[-1].logprob:
            live = []
            break
        state = stepper.select(state, np.array(rows))
        live = new_live
    for h in live:
        h.capped = True
        pool.append(h)
    pool.sort(key=rank_key)
    return pool


def caption_batch(model: GliedDecoder, src: Sources, beam: int = 1, max_len: int | None = None) -> list[Hypothesis]:
    """Best hypothesis per image; beam 1 runs batched greedy decoding."""
    max_len = max_len or model.config.max_len
    if beam == 1:
        return greedy_decode(ModelStepper(model, src), max_len)
    out = []
    for i in range(src.batch):
        out.append(beam_search(ModelStepper(model, src.select([i])), beam, max_len)[0])
    return out
