"""Cross-modal fully-attentive caption decoder and its distilling extension.

A single :class:`GliedDecoder` covers the base model, GLIED, and every
ablation in between; three config flags decide which stages are wired in.

Data flow for one timestep (all flags on)::

    x      = proj(E[word]) + pos                  input word
    t      = G(H_ad(x, A, A), x)                  attribute collocation
    xt     = G(H_x(t, T, T), t)                   caption context (causal)
    c_g    = G(H_v(xt, I~, I~), xt)               global aspect
    c~_g   = G(G(F(c_g), c_g), x)
    c_l    = G(H_vl(c~_g, I, I) + H_al(c~_g, A, A), c~_g)
    logits = c_l @ W_C

with ``I~ = postprocess(G(H_vd(I, I, I), I))`` computed once per image.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .attention import (
    GBlockParams,
    Linear,
    MultiHeadParams,
    PostProcessParams,
    causal_mask,
    g_block,
    glorot,
    multi_head,
    post_process,
)
from .autograd import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass
class ModelConfig:
    vocab_size: int
    d_e: int = 256
    d_h: int = 512
    n_heads: int = 8
    d_f: int = 2048
    d_r: int = 2048
    dropout: float = 0.1
    max_len: int = 24
    global_visual: bool = False
    global_attribute: bool = False
    local_distill: bool = False

    def __post_init__(self):
        if self.d_h % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide d_h={self.d_h}")
        if min(self.vocab_size, self.d_e, self.d_h, self.d_f, self.d_r, self.max_len) < 1:
            raise ValueError("model sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def variant(self) -> str:
        flags = (self.global_visual, self.global_attribute, self.local_distill)
        return VARIANT_NAMES.get(flags, "custom")

    def with_variant(self, name: str) -> "ModelConfig":
        return dataclasses.replace(self, **variant_flags(name))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full_size(cls, variant: str = "glied", vocab_size: int = 9487) -> "ModelConfig":
        return cls(vocab_size=vocab_size, **variant_flags(variant))


VARIANT_NAMES = {
    (False, False, False): "base",
    (True, False, False): "global_visual",
    (False, True, False): "global_attribute",
    (True, True, False): "global",
    (False, False, True): "local",
    (True, True, True): "glied",
}


def variant_flags(name: str) -> dict:
    for flags, n in VARIANT_NAMES.items():
        if n == name:
            return dict(zip(("global_visual", "global_attribute", "local_distill"), flags))
    raise ValueError(f"unknown model variant {name!r}; choose from {sorted(VARIANT_NAMES.values())}")


def positional_encoding(n_pos: int, d: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class Sources:
    """Per-image encoded sources, batched with padding masks."""

    regions: Tensor                    # I, (B, k, d_h)
    attributes: Tensor                 # A, (B, ka, d_h)
    region_mask: np.ndarray            # (B, k) bool
    attr_mask: np.ndarray              # (B, ka) bool
    distilled: Tensor | None = None    # I~, (B, k, d_h)
    distill_weights: np.ndarray | None = None

    @property
    def batch(self) -> int:
        return self.regions.shape[0]

    def select(self, idx) -> "Sources":
        idx = np.asarray(idx)
        return Sources(
            ag.index_rows(self.regions, idx),
            ag.index_rows(self.attributes, idx),
            self.region_mask[idx],
            self.attr_mask[idx],
            None if self.distilled is None else ag.index_rows(self.distilled, idx),
            None if self.distill_weights is None else self.distill_weights[idx],
        )


@dataclass
class DecoderState:
    """History for incremental decoding: the packed context inputs so far."""

    history: Tensor | None = None
    step: int = 0

    def select(self, idx) -> "DecoderState":
        if self.history is None:
            return DecoderState(None, self.step)
        return DecoderState(ag.index_rows(self.history, np.asarray(idx)), self.step)


@dataclass
class AttentionTrace:
    """Attention distributions, each array's last axis is normalized.

    Shapes (per batch row b, head h, query q):
      context       (B, n, T, T_hist)
      visual, attribute, local_visual, local_attribute   (B, 1, T, k)
      collocation   (B, 1, T, ka)
      region_groups (B, n, k, k)   computed once per image
    """

    context: list[np.ndarray] = field(default_factory=list)
    visual: list[np.ndarray] = field(default_factory=list)
    attribute: list[np.ndarray] = field(default_factory=list)
    collocation: list[np.ndarray] = field(default_factory=list)
    local_visual: list[np.ndarray] = field(default_factory=list)
    local_attribute: list[np.ndarray] = field(default_factory=list)
    region_groups: np.ndarray | None = None

    def distributions(self):
        for name in ("context", "visual", "attribute", "collocation", "local_visual", "local_attribute"):
            for t, w in enumerate(getattr(self, name)):
                yield name, t, w
        if self.region_groups is not None:
            yield "region_groups", 0, self.region_groups

    def max_normalization_error(self) -> float:
        err = 0.0
        for _, _, w in self.distributions():
            err = max(err, float(np.abs(w.sum(axis=-1) - 1.0).max()))
        return err


class GliedDecoder:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = cfg = config
        rng = np.random.default_rng(seed)
        d_h = cfg.d_h
        self.embed = ag.parameter(glorot(rng, cfg.vocab_size, cfg.d_e))
        self.embed_proj = Linear(cfg.d_e, d_h, rng)
        self.region_proj = Linear(cfg.d_r, d_h, rng)
        self.context_attn = MultiHeadParams(d_h, cfg.n_heads, rng)
        self.context_g = GBlockParams(d_h, cfg.dropout)
        # one single-head parameter set serves both visual and semantic attention
        self.cross_attn = MultiHeadParams(d_h, 1, rng)
        self.cross_g = GBlockParams(d_h, cfg.dropout)
        self.post = PostProcessParams(d_h, cfg.d_f, cfg.dropout, rng)
        self.w_out = ag.parameter(glorot(rng, d_h, cfg.vocab_size))
        self.region_attn = self.region_g = self.region_post = None
        self.colloc_attn = self.colloc_g = None
        self.local_attn = self.local_g = None
        if cfg.global_visual:
            self.region_attn = MultiHeadParams(d_h, cfg.n_heads, rng)
            self.region_g = GBlockParams(d_h, cfg.dropout)
            self.region_post = PostProcessParams(d_h, cfg.d_f, cfg.dropout, rng)
        if cfg.global_attribute:
            self.colloc_attn = MultiHeadParams(d_h, 1, rng)
            self.colloc_g = GBlockParams(d_h, cfg.dropout)
        if cfg.local_distill:
            self.local_attn = MultiHeadParams(d_h, 1, rng)
            self.local_g = GBlockParams(d_h, cfg.dropout)
        self._pe = positional_encoding(cfg.max_len + 1, d_h)
        for name, p in self.named_parameters():
            p.name = name

    # -- registry ---------------------------------------------------------

    def named_parameters(self, with_aliases: bool = False):
        """(name, tensor) pairs in a fixed order.

        With ``with_aliases`` the shared tensors are listed a second time
        under their alias names (attr_embed, H_a, H_al).
        """
        out = [("word_embed", self.embed)]
        if with_aliases:
            out.append(("attr_embed", self.embed))
        out += list(self.embed_proj.named_parameters("embed_proj"))
        out += list(self.region_proj.named_parameters("region_proj"))
        out += list(self.context_attn.named_parameters("H_x"))
        out += list(self.context_g.named_parameters("H_x.g"))
        out += list(self.cross_attn.named_parameters("H_v"))
        if with_aliases:
            out += list(self.cross_attn.named_parameters("H_a"))
        out += list(self.cross_g.named_parameters("H_v.g"))
        out += list(self.post.named_parameters("post"))
        if self.region_attn is not None:
            out += list(self.region_attn.named_parameters("H_vd"))
            out += list(self.region_g.named_parameters("H_vd.g"))
            out += list(self.region_post.named_parameters("H_vd.post"))
        if self.colloc_attn is not None:
            out += list(self.colloc_attn.named_parameters("H_ad"))
            out += list(self.colloc_g.named_parameters("H_ad.g"))
        if self.local_attn is not None:
            out += list(self.local_attn.named_parameters("H_vl"))
            if with_aliases:
                out += list(self.local_attn.named_parameters("H_al"))
            out += list(self.local_g.named_parameters("H_vl.g"))
        out.append(("W_C", self.w_out))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> tuple[int, dict[str, int]]:
        """Total scalar parameters (shared tensors once) and a per-component breakdown."""
        seen: set[int] = set()
        breakdown: dict[str, int] = {}
        for name, p in self.named_parameters(with_aliases=True):
            if id(p) in seen:
                continue
            seen.add(id(p))
            comp = _component(name)
            breakdown[comp] = breakdown.get(comp, 0) + p.data.size
        return sum(breakdown.values()), breakdown

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for p, arr in zip(self.parameters(), snap):
            p.data[...] = arr

    # -- inputs -----------------------------------------------------------

    def embed_words(self, ids, start_pos: int = 0, training: bool = False, rng=None) -> Tensor:
        """Shared-table lookup, projection to d_h, plus the sinusoidal position term."""
        ids = np.asarray(ids, dtype=np.int64)
        t = ids.shape[-1]
        if start_pos + t > len(self._pe):
            raise ValueError(f"position {start_pos + t - 1} exceeds max_len {self.config.max_len}")
        x = self.embed_proj(ag.embedding(self.embed, ids))
        pe = np.broadcast_to(self._pe[start_pos:start_pos + t], x.shape)
        return ag.dropout(ag.add_const(x, pe), self.config.dropout, training, rng)

    def embed_attributes(self, ids, training: bool = False, rng=None) -> Tensor:
        x = self.embed_proj(ag.embedding(self.embed, ids))
        return ag.dropout(x, self.config.dropout, training, rng)

    def project_regions(self, raw) -> Tensor:
        raw = ag.as_tensor(raw)
        if raw.shape[-1] != self.config.d_r:
            raise ag.ShapeError(f"region width {raw.shape[-1]} != d_r={self.config.d_r}")
        return self.region_proj(raw)

    def global_visual_distill(self, regions: Tensor, region_mask: np.ndarray, training: bool = False,
                              rng=None) -> tuple[Tensor, np.ndarray]:
        """Region groupings by self-attention, post-processed like the word path."""
        att, w = multi_head(regions, regions, regions, self.region_attn, region_mask[:, None, :])
        grouped = g_block(att, regions, self.region_g, training, rng)
        return post_process(grouped, regions, self.region_post, training, rng), w

    def global_attribute_distill(self, x: Tensor, src: Sources, training: bool = False,
                                 rng=None) -> tuple[Tensor, np.ndarray]:
        """Pivot-word collocation over the attribute set; one query per word."""
        att, w = multi_head(x, src.attributes, src.attributes, self.colloc_attn, src.attr_mask[:, None, :])
        return g_block(att, x, self.colloc_g, training, rng), w

    def encode(self, regions, region_mask, attr_ids, attr_mask, training: bool = False,
               rng=None) -> Sources:
        region_mask = np.asarray(region_mask, dtype=bool)
        attr_mask = np.asarray(attr_mask, dtype=bool)
        if not region_mask.any(axis=-1).all() or not attr_mask.any(axis=-1).all():
            raise ValueError("every image needs at least one region and one attribute")
        i_proj = self.project_regions(regions)
        a_emb = self.embed_attributes(attr_ids, training, rng)
        src = Sources(i_proj, a_emb, region_mask, attr_mask)
        if self.config.global_visual:
            src.distilled, src.distill_weights = self.global_visual_distill(i_proj, region_mask, training, rng)
        return src

    # -- decoding core ----------------------------------------------------

    def _after_context(self, x: Tensor, xt: Tensor, src: Sources, training, rng, trace):
        cfg = self.config
        vmask = src.region_mask[:, None, :]
        amask = src.attr_mask[:, None, :]
        vis_keys = src.distilled if cfg.global_visual else src.regions
        vis, wv = multi_head(xt, vis_keys, vis_keys, self.cross_attn, vmask)
        mid = vis
        # GLIED's global aspect omits semantic attention; attributes return in the local stage
        semantic = not (cfg.global_visual and cfg.local_distill)
        if semantic:
            sem, wa = multi_head(xt, src.attributes, src.attributes, self.cross_attn, amask)
            mid = ag.add(vis, sem)
        c = g_block(mid, xt, self.cross_g, training, rng)
        ct = post_process(c, x, self.post, training, rng)
        if trace is not None:
            trace.visual.append(wv)
            if semantic:
                trace.attribute.append(wa)
        if cfg.local_distill:
            lv, wlv = multi_head(ct, src.regions, src.regions, self.local_attn, vmask)
            la, wla = multi_head(ct, src.attributes, src.attributes, self.local_attn, amask)
            ct = g_block(ag.add(lv, la), ct, self.local_g, training, rng)
            if trace is not None:
                trace.local_visual.append(wlv)
                trace.local_attribute.append(wla)
        return ag.linear(ct, self.w_out)

    def _context_input(self, x: Tensor, src: Sources, training, rng, trace):
        if not self.config.global_attribute:
            return x
        t, w = self.global_attribute_distill(x, src, training, rng)
        if trace is not None:
            trace.collocation.append(w)
        return t

    def forward(self, tokens, src: Sources, training: bool = False, rng=None,
                trace: AttentionTrace | None = None) -> Tensor:
        """Teacher-forced logits (B, T, V) for input tokens (B, T) under a causal mask."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ag.ShapeError("forward expects (batch, time) token ids")
        t = tokens.shape[1]
        if t > self.config.max_len:
            raise ValueError(f"caption length {t} exceeds max_len {self.config.max_len}")
        if trace is not None and src.distill_weights is not None:
            trace.region_groups = src.distill_weights
        x = self.embed_words(tokens, 0, training, rng)
        q = self._context_input(x, src, training, rng, trace)
        ctx, w = multi_head(q, q, q, self.context_attn, causal_mask(t))
        if trace is not None:
            trace.context.append(w)
        xt = g_block(ctx, q, self.context_g, training, rng)
        return self._after_context(x, xt, src, training, rng, trace)

    def step(self, tokens, state: DecoderState, src: Sources, training: bool = False, rng=None,
             trace: AttentionTrace | None = None) -> tuple[Tensor, DecoderState]:
        """One incremental timestep: logits (B, V) for the next word and the extended state."""
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        if state.step == 0 and not (tokens == BOS).all():
            raise ValueError("decoding must start from the begin-of-sentence token")
        if state.step >= self.config.max_len:
            raise ValueError(f"step {state.step} exceeds max_len {self.config.max_len}")
        if trace is not None and state.step == 0 and src.distill_weights is not None:
            trace.region_groups = src.distill_weights
        x = self.embed_words(tokens, state.step, training, rng)
        q = self._context_input(x, src, training, rng, trace)
        hist = q if state.history is None else ag.concat([state.history, q], axis=1)
        ctx, w = multi_head(q, hist, hist, self.context_attn)
        if trace is not None:
            trace.context.append(w)
        xt = g_block(ctx, q, self.context_g, training, rng)
        logits = self._after_context(x, xt, src, training, rng, trace)
        return ag.reshape(logits, (logits.shape[0], logits.shape[2])), DecoderState(hist, state.step + 1)


def _component(name: str) -> str:
    head = name.split(".")[0]
    if name.startswith("H_vd.post"):
        return "H_vd.post"
    if name.startswith("post.ff"):
        return "post.ff"
    if name.startswith("post."):
        return "post.g"
    return head


def build_model(config: ModelConfig, seed: int = 0) -> GliedDecoder:
    return GliedDecoder(config, seed)
