"""Temporal aggregation decoder.

Video-level queries initialize per-frame queries through one unmasked
attention pass over the concatenated multi-scale frame features. Each
layer then runs masked cross-attention at the frame level against one
feature scale (round-robin over scales), per-frame self-attention and a
feed-forward block, and finally folds the frame-level queries back into
the video-level queries through a learned scalar gate.

Two ablation topologies share the layer stack: `one_to_video` keeps a
single query set attending to all frames' tokens at once, and
`one_to_frame` replicates the query set per frame without aggregation.

Layer internals use pre-normalization; learned positional embeddings are
added to query projections, feature tokens carry learned level + 2-D
position embeddings, and values stay unembedded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .nn import (FeedForward, Linear, LayerNorm, MaskEmbedMLP, Module,
                 MultiheadAttention)
from .predictions import PredictionSet
from .rng import Rng
from .tensor import Tensor, concat, stack

MODES = ("one_to_video", "one_to_frame", "video_frame")

__all__ = [
    "DecoderConfig",
    "DecoderState",
    "LayerOutput",
    "DecoderOutput",
    "TemporalAggregationDecoder",
    "aggregate_to_video",
    "masked_cross_attention",
    "compute_attention_mask",
]


@dataclass
class DecoderConfig:
    num_queries: int
    channels: int
    num_layers: int
    frames: int
    num_classes: int
    num_scales: int
    heads: int = 1
    temporal_mode: str = "video_frame"
    ffn_dim: int | None = None

    def __post_init__(self):
        if self.num_queries < 1 or self.num_layers < 1:
            raise ContractError("need at least one query and one layer")
        if self.channels % self.heads != 0:
            raise ContractError("channels must be divisible by heads")
        if self.temporal_mode not in MODES:
            raise ContractError(f"temporal_mode must be one of {MODES}")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.channels


@dataclass
class DecoderState:
    """Queries and upcoming attention masks threaded through the layers.

    frame_queries exist only in the one_to_frame and video_frame modes;
    attention_masks hold the binary masks the next layer will consume
    (per frame, or one wide mask in one_to_video mode).
    """

    video_queries: Tensor | None
    frame_queries: list | None
    attention_masks: list | None


@dataclass
class LayerOutput:
    """Predictions emitted after one layer.

    train: pairs fed to matching and the loss (video-level classes with
           the stacked frame-level masks, mode permitting)
    video: video-level classes and video-level masks (video_frame mode)
    frame_class_probs: [T, N, K+1] frame-level class distributions
    """

    train: PredictionSet
    video: PredictionSet | None = None
    frame_class_probs: Tensor | None = None


@dataclass
class DecoderOutput:
    layers: list
    attention_widths: list  # key-sequence width of each layer's cross-attention

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]


def compute_attention_mask(mask_logits: np.ndarray, target_hw) -> np.ndarray:
    """Nearest-neighbor resize of [N, H, W] logits to a target scale,
    then threshold sigmoid >= 0.5; returns binary [N, target_h * target_w]."""
    n, h, w = mask_logits.shape
    th, tw = target_hw
    ri = ((np.arange(th) + 0.5) * h / th).astype(np.intp)
    ci = ((np.arange(tw) + 0.5) * w / tw).astype(np.intp)
    resized = mask_logits[:, ri[:, None], ci[None, :]]
    return (resized >= 0.0).astype(np.float64).reshape(n, th * tw)


def masked_cross_attention(queries: Tensor, frame_feat: Tensor,
                           mask: np.ndarray | None, attn: MultiheadAttention,
                           q_in: Tensor | None = None,
                           k_in: Tensor | None = None) -> Tensor:
    """Residual masked attention: Q + softmax(restricted QK^T/sqrt(C)) V.

    q_in / k_in optionally override the projected inputs (normalization,
    positional terms) while the residual and the values stay raw. A
    query whose mask row admits nothing attends unmasked instead.
    """
    return queries + attn(queries if q_in is None else q_in,
                          frame_feat if k_in is None else k_in,
                          frame_feat, mask)


def aggregate_to_video(video_queries: Tensor, frame_queries: list,
                       gate: Linear) -> Tensor:
    """Fold frame-level queries into the video-level ones: per query, a
    softmax over the per-frame scalar gate weights the frame queries,
    and the weighted sum is added residually."""
    scores = concat([gate(q) for q in frame_queries], axis=1)  # [N, T]
    w = scores.softmax(axis=1)
    agg = None
    for t, q in enumerate(frame_queries):
        term = w.narrow(1, t, 1) * q
        agg = term if agg is None else agg + term
    return video_queries + agg


class TemporalAggregationDecoder(Module):
    """Decoder stack plus prediction heads for a fixed feature geometry."""

    def __init__(self, cfg: DecoderConfig, scale_shapes: list, rng: Rng):
        if len(scale_shapes) != cfg.num_scales:
            raise ContractError("scale_shapes must match num_scales")
        areas = [h * w for h, w in scale_shapes]
        if any(a >= b for a, b in zip(areas, areas[1:])):
            raise ContractError("scales must be in strictly increasing resolution")
        self.cfg = cfg
        self.scale_shapes = [tuple(s) for s in scale_shapes]
        c, n_q = cfg.channels, cfg.num_queries
        bound = 1.0 / np.sqrt(c)

        self.query_init = Tensor(rng.uniform((n_q, c), -bound, bound), requires_grad=True)
        self.query_pos = Tensor(rng.uniform((n_q, c), -bound, bound), requires_grad=True)
        self.level_embed = Tensor(rng.uniform((cfg.num_scales, c), -bound, bound),
                                  requires_grad=True)
        self.pos_embeds = [
            Tensor(rng.uniform((h * w, c), -bound, bound), requires_grad=True)
            for h, w in self.scale_shapes
        ]

        self.init_attn = MultiheadAttention(c, cfg.heads, rng)
        self.cross_attns = [MultiheadAttention(c, cfg.heads, rng)
                            for _ in range(cfg.num_layers)]
        self.self_attns = [MultiheadAttention(c, cfg.heads, rng)
                           for _ in range(cfg.num_layers)]
        self.ffns = [FeedForward(c, cfg.ffn_dim, rng) for _ in range(cfg.num_layers)]
        self.norms_cross = [LayerNorm(c) for _ in range(cfg.num_layers)]
        self.norms_self = [LayerNorm(c) for _ in range(cfg.num_layers)]
        self.norms_ffn = [LayerNorm(c) for _ in range(cfg.num_layers)]
        self.gates = [Linear(c, 1, rng) for _ in range(cfg.num_layers)]
        for g in self.gates:
            g.bias.data[:] = 0.0

        self.class_head = Linear(c, cfg.num_classes + 1, rng)
        self.mask_embed = MaskEmbedMLP(c, rng)

    # -- feature plumbing -------------------------------------------------------

    def _frame_tokens(self, features: list):
        """Split each scale into per-frame token matrices [H_i W_i, C] and
        build the key-side variants with position + level embeddings."""
        t_frames = self.cfg.frames
        values, keys = [], []
        for i, feat in enumerate(features):
            tf, h, w, c = feat.shape
            if tf != t_frames or (h, w) != self.scale_shapes[i] or c != self.cfg.channels:
                raise ShapeError(f"feature scale {i} has unexpected shape {feat.shape}")
            lvl = self.level_embed.narrow(0, i, 1)
            per_frame_v, per_frame_k = [], []
            for t in range(t_frames):
                tok = feat.narrow(0, t, 1).reshape(h * w, c)
                per_frame_v.append(tok)
                per_frame_k.append(tok + self.pos_embeds[i] + lvl)
            values.append(per_frame_v)
            keys.append(per_frame_k)
        return values, keys

    def init_frame_queries(self, values, keys) -> list:
        """Unmasked attention from the video-level queries to each frame's
        concatenated multi-scale tokens, producing the frame-level queries."""
        q_in = self.query_init + self.query_pos
        out = []
        for t in range(self.cfg.frames):
            k = concat([keys[i][t] for i in range(self.cfg.num_scales)], axis=0)
            v = concat([values[i][t] for i in range(self.cfg.num_scales)], axis=0)
            out.append(self.init_attn(q_in, k, v))
        return out

    def predict_heads(self, queries: Tensor, pixel_features: Tensor) -> PredictionSet:
        """Class distribution per query plus mask logits as the dot product
        of the mask embedding with every per-pixel feature."""
        class_probs = self.class_head(queries).softmax(axis=1)
        embed = self.mask_embed(queries)
        t, h, w, c = pixel_features.shape
        pix = pixel_features.reshape(t * h * w, c)
        logits = (embed @ pix.transpose()).reshape(queries.shape[0], t, h, w)
        return PredictionSet(class_probs, logits)

    # -- layers ----------------------------------------------------------------------

    def decoder_layer(self, state: DecoderState, layer: int,
                      values, keys) -> DecoderState:
        """One decoder layer at scale `layer mod num_scales`."""
        mode = self.cfg.temporal_mode
        scale = layer % self.cfg.num_scales
        qpos = self.query_pos

        if mode == "one_to_video":
            if state.video_queries is None or state.frame_queries is not None:
                raise ContractError("one_to_video state carries only video queries")
            k = concat([keys[scale][t] for t in range(self.cfg.frames)], axis=0)
            v = concat([values[scale][t] for t in range(self.cfg.frames)], axis=0)
            x = state.video_queries
            x = masked_cross_attention(
                x, v, state.attention_masks[0], self.cross_attns[layer],
                q_in=self.norms_cross[layer](x) + qpos, k_in=k)
            y = self.norms_self[layer](x)
            x = x + self.self_attns[layer](y + qpos, y + qpos, y)
            x = x + self.ffns[layer](self.norms_ffn[layer](x))
            return DecoderState(x, None, None)

        if state.frame_queries is None:
            raise ContractError(f"{mode} state carries frame queries")
        new_frames = []
        for t in range(self.cfg.frames):
            x = state.frame_queries[t]
            x = masked_cross_attention(
                x, values[scale][t], state.attention_masks[t],
                self.cross_attns[layer],
                q_in=self.norms_cross[layer](x) + qpos, k_in=keys[scale][t])
            y = self.norms_self[layer](x)
            x = x + self.self_attns[layer](y + qpos, y + qpos, y)
            x = x + self.ffns[layer](self.norms_ffn[layer](x))
            new_frames.append(x)

        if mode == "video_frame":
            video = aggregate_to_video(state.video_queries, new_frames,
                                       self.gates[layer])
            return DecoderState(video, new_frames, None)
        return DecoderState(None, new_frames, None)

    # -- forward -----------------------------------------------------------------------

    def forward(self, features: list, pixel_features: Tensor) -> DecoderOutput:
        """Run initialization plus all layers; emits per-layer predictions.

        features: one tensor [T, H_i, W_i, C] per scale, lowest resolution
        first; pixel_features back the mask heads (highest resolution).
        """
        cfg = self.cfg
        values, keys = self._frame_tokens(features)
        t_frames = cfg.frames

        frame_pix = [pixel_features.narrow(0, t, 1) for t in range(t_frames)]

        if cfg.temporal_mode == "video_frame":
            state = DecoderState(self.query_init,
                                 self.init_frame_queries(values, keys), None)
        elif cfg.temporal_mode == "one_to_frame":
            state = DecoderState(None, [self.query_init] * t_frames, None)
        else:
            state = DecoderState(self.query_init, None, None)

        layers = []
        widths = []
        frame_sets = None
        video_set = None
        if state.frame_queries is not None:
            frame_sets = [self.predict_heads(q, frame_pix[t])
                          for t, q in enumerate(state.frame_queries)]
        else:
            video_set = self.predict_heads(state.video_queries, pixel_features)

        for layer in range(cfg.num_layers):
            scale = layer % cfg.num_scales
            hw = self.scale_shapes[scale]
            if cfg.temporal_mode == "one_to_video":
                per_frame = [
                    compute_attention_mask(
                        video_set.mask_logits.narrow(1, t, 1).data.reshape(
                            cfg.num_queries, *pixel_features.shape[1:3]), hw)
                    for t in range(t_frames)
                ]
                state.attention_masks = [np.concatenate(per_frame, axis=1)]
                widths.append(t_frames * hw[0] * hw[1])
            else:
                state.attention_masks = [
                    compute_attention_mask(
                        fs.mask_logits.data.reshape(
                            cfg.num_queries, *pixel_features.shape[1:3]), hw)
                    for fs in frame_sets
                ]
                widths.append(hw[0] * hw[1])

            state = self.decoder_layer(state, layer, values, keys)

            if state.frame_queries is not None:
                frame_sets = [self.predict_heads(q, frame_pix[t])
                              for t, q in enumerate(state.frame_queries)]
                frame_class = stack([fs.class_probs for fs in frame_sets], axis=0)
                frame_masks = concat([fs.mask_logits for fs in frame_sets], axis=1)
            if state.video_queries is not None:
                video_set = self.predict_heads(state.video_queries, pixel_features)

            if cfg.temporal_mode == "video_frame":
                train = PredictionSet(video_set.class_probs, frame_masks)
                layers.append(LayerOutput(train, video_set, frame_class))
            elif cfg.temporal_mode == "one_to_frame":
                train = PredictionSet(frame_class.mean(axis=0), frame_masks)
                layers.append(LayerOutput(train, None, frame_class))
            else:
                layers.append(LayerOutput(video_set, video_set, None))

        return DecoderOutput(layers, widths)
