"""The full spotting network: backbone, deformable encoder, guidance
generator, box-to-polygon query construction, and dual decoders.

One forward pass maps an image to Q composite predictions (confidence,
N control points, M character distributions) plus the top-Q proposals
used for intermediate supervision. The location and character decoders
consume identical per-instance reference points so both attend to the
same image context.
"""

from __future__ import annotations

import numpy as np

from .attention import FactorizedSelfAttention, MSDeformAttention
from .config import ModelConfig
from .encoding import BoxEncoder, sine_pe_1d, sine_pe_2d
from .engine import Tensor, load_checkpoint, nn, ops, save_checkpoint
from .geometry import ControlPointSet, bezier_to_polygon

BACKBONE_CHANNELS = (16, 24, 32, 48, 64)


def preprocess_image(image, dtype="f32"):
    """[H, W, 3] uint8 -> normalized float [3, H, W] in [-1, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] image, got {arr.shape}")
    np_dtype = np.float32 if dtype == "f32" else np.float64
    return (arr.astype(np_dtype) / 127.5 - 1.0).transpose(2, 0, 1)


class ConvBackbone(nn.Module):
    """Four strided conv stages emitting stride 8/16/32 maps at d_model width."""

    def __init__(self, d_model, rng, dtype="f32"):
        c1, c2, c3, c4, c5 = BACKBONE_CHANNELS
        self.stem_a = nn.Conv2d(3, c1, 3, rng, stride=2, padding=1, dtype=dtype)
        self.stem_b = nn.Conv2d(c1, c2, 3, rng, stride=2, padding=1, dtype=dtype)
        self.stage3 = nn.Conv2d(c2, c3, 3, rng, stride=2, padding=1, dtype=dtype)
        self.stage4 = nn.Conv2d(c3, c4, 3, rng, stride=2, padding=1, dtype=dtype)
        self.stage5 = nn.Conv2d(c4, c5, 3, rng, stride=2, padding=1, dtype=dtype)
        self.proj3 = nn.Conv2d(c3, d_model, 1, rng, dtype=dtype)
        self.proj4 = nn.Conv2d(c4, d_model, 1, rng, dtype=dtype)
        self.proj5 = nn.Conv2d(c5, d_model, 1, rng, dtype=dtype)

    def __call__(self, image):
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"image must be [3, H, W], got {image.shape}")
        if image.shape[1] % 32 or image.shape[2] % 32:
            raise ValueError(f"image sides must be divisible by 32, got {image.shape}")
        x = ops.relu(self.stem_a(image))
        x = ops.relu(self.stem_b(x))
        c3 = ops.relu(self.stage3(x))
        c4 = ops.relu(self.stage4(c3))
        c5 = ops.relu(self.stage5(c4))
        return [self.proj3(c3), self.proj4(c4), self.proj5(c5)]


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, rng, dtype="f32"):
        self.attn = MSDeformAttention(cfg.d_model, cfg.heads, cfg.levels,
                                      cfg.points, rng, dtype=dtype)
        self.norm_attn = nn.LayerNorm(cfg.d_model, dtype=dtype)
        self.ffn = nn.MLP([cfg.d_model, cfg.ffn_dim, cfg.d_model], rng, dtype=dtype)
        self.norm_ffn = nn.LayerNorm(cfg.d_model, dtype=dtype)

    def __call__(self, tokens, pos, refs, shapes):
        attended = self.attn(tokens + pos, refs, tokens, shapes)
        tokens = self.norm_attn(tokens + attended)
        return self.norm_ffn(tokens + self.ffn(tokens))


class GuidanceGenerator(nn.Module):
    """Per-token proposal head: score plus a box around the token location."""

    INITIAL_SIZE = 0.1

    def __init__(self, d_model, rng, dtype="f32"):
        self.score_head = nn.Linear(d_model, 1, rng, dtype=dtype)
        self.box_head = nn.MLP([d_model, d_model, 4], rng, dtype=dtype)
        # start proposals at the token location with a small default size
        last = self.box_head.layers[-1]
        last.w.data[:] = 0
        last.b.data[:2] = 0
        last.b.data[2:] = np.log(self.INITIAL_SIZE / (1.0 - self.INITIAL_SIZE))

    def __call__(self, memory, token_locs):
        scores = ops.sigmoid(ops.reshape(self.score_head(memory), (-1,)))
        delta = self.box_head(memory)
        loc_logit = ops.inverse_sigmoid(Tensor(token_locs, dtype=memory.dtype))
        center = ops.sigmoid(delta[:, :2] + loc_logit)
        size = ops.sigmoid(delta[:, 2:])
        boxes = ops.concat([center, size], axis=1)
        return scores, boxes


class DecoderLayer(nn.Module):
    """Factorized self-attention, deformable cross-attention, feed-forward."""

    def __init__(self, cfg: ModelConfig, rng, dtype="f32"):
        self.self_attn = FactorizedSelfAttention(cfg.d_model, cfg.heads, rng,
                                                 dtype=dtype)
        self.cross_attn = MSDeformAttention(cfg.d_model, cfg.heads, cfg.levels,
                                            cfg.points, rng, dtype=dtype)
        self.norm_cross = nn.LayerNorm(cfg.d_model, dtype=dtype)
        self.ffn = nn.MLP([cfg.d_model, cfg.ffn_dim, cfg.d_model], rng, dtype=dtype)
        self.norm_ffn = nn.LayerNorm(cfg.d_model, dtype=dtype)

    def __call__(self, x, subquery_refs, memory, shapes):
        q, n_sub, d = x.shape
        x = self.self_attn(x)
        flat = ops.reshape(x, (q * n_sub, d))
        attended = self.cross_attn(flat, subquery_refs, memory, shapes)
        x = self.norm_cross(x + ops.reshape(attended, (q, n_sub, d)))
        return self.norm_ffn(x + self.ffn(x))


class SpottingModel(nn.Module):
    """Single encoder, guidance generator, and dual decoders."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype: str = "f32"):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self._dtype = dtype
        d = cfg.d_model
        self.backbone = ConvBackbone(d, rng, dtype=dtype)
        self.level_embed = nn.parameter(rng.normal(scale=0.02, size=(cfg.levels, d)),
                                        dtype)
        self.encoder_layers = [EncoderLayer(cfg, rng, dtype=dtype)
                               for _ in range(cfg.enc_layers)]
        self.guidance = GuidanceGenerator(d, rng, dtype=dtype)
        self.box_encoder = BoxEncoder(d, rng, dtype=dtype)
        self.ctrl_point_embed = nn.parameter(rng.normal(scale=0.02,
                                                        size=(cfg.num_ctrl_points, d)),
                                             dtype)
        self.instance_embed = nn.parameter(rng.normal(scale=0.02,
                                                      size=(cfg.num_queries, d)),
                                           dtype)
        self.loc_layers = [DecoderLayer(cfg, rng, dtype=dtype)
                           for _ in range(cfg.dec_layers)]
        self.char_embed = nn.parameter(rng.normal(scale=0.02, size=(d,)), dtype)
        self.char_layers = [DecoderLayer(cfg, rng, dtype=dtype)
                            for _ in range(cfg.dec_layers)]
        self.confidence_head = nn.Linear(d, 1, rng, dtype=dtype)
        self.coord_head = nn.MLP([d, d, 2], rng, dtype=dtype)
        self.char_head = nn.Linear(d, cfg.n_classes, rng, dtype=dtype)
        self._char_pe = sine_pe_1d(np.arange(cfg.max_text_len), d)
        self._pe_cache = {}

    # -- token plumbing -------------------------------------------------

    def _token_metadata(self, shapes):
        """2-D sine PE (constant part) and per-token reference points."""
        key = tuple(shapes)
        if key not in self._pe_cache:
            pes, refs = [], []
            for lh, lw in shapes:
                pes.append(sine_pe_2d(lh, lw, self.cfg.d_model).reshape(lh * lw, -1))
                ys, xs = np.meshgrid(np.arange(lh), np.arange(lw), indexing="ij")
                refs.append(np.stack([(xs.ravel() + 0.5) / lw,
                                      (ys.ravel() + 0.5) / lh], axis=1))
            self._pe_cache[key] = (pes, np.concatenate(refs, axis=0))
        return self._pe_cache[key]

    def encode(self, image):
        """Backbone + flattening + deformable self-attention stack."""
        pyramid = self.backbone(image)[-self.cfg.levels:]
        shapes, tokens = [], []
        for level in pyramid:
            d, lh, lw = level.shape
            shapes.append((lh, lw))
            tokens.append(ops.reshape(ops.transpose(level, (1, 2, 0)), (lh * lw, d)))
        memory = ops.concat(tokens, axis=0) if len(tokens) > 1 else tokens[0]
        pes, token_refs = self._token_metadata(shapes)
        pos_parts = [Tensor(pe, dtype=self._dtype) + self.level_embed[lvl]
                     for lvl, pe in enumerate(pes)]
        pos = ops.concat(pos_parts, axis=0) if len(pos_parts) > 1 else pos_parts[0]
        for layer in self.encoder_layers:
            memory = layer(memory, pos, token_refs, shapes)
        return memory, shapes, token_refs

    def generate_guidance(self, memory, token_refs):
        """Top-Q proposals (scores non-increasing); selection not differentiated."""
        q = self.cfg.num_queries
        if memory.shape[0] < q:
            raise ValueError(f"{memory.shape[0]} tokens < {q} queries")
        scores, boxes = self.guidance(memory, token_refs)
        order = np.argsort(-scores.data, kind="stable")[:q]
        return ops.gather(scores, order, axis=0), ops.gather(boxes, order, axis=0)

    def build_queries(self, proposal_boxes):
        """Initial composite queries: phi(box) + shared control point embedding.

        With box guidance off, phi is replaced by a per-instance learnable
        embedding; reference points still come from the proposal centers.
        """
        q, n, d = self.cfg.num_queries, self.cfg.num_ctrl_points, self.cfg.d_model
        if self.cfg.box_guidance:
            phi = self.box_encoder(proposal_boxes)
        else:
            phi = self.instance_embed
        queries = ops.reshape(phi, (q, 1, d)) + ops.reshape(self.ctrl_point_embed,
                                                            (1, n, d))
        refs = proposal_boxes.data[:, :2].copy()  # detached reference points
        return queries, refs

    def _decode(self, layers, x, instance_refs, memory, shapes, collect):
        n_sub = x.shape[1]
        subquery_refs = np.repeat(instance_refs, n_sub, axis=0)
        outputs = []
        for layer in layers:
            x = layer(x, subquery_refs, memory, shapes)
            if collect:
                outputs.append(x)
        return outputs if collect else [x]

    def decode_location(self, queries, instance_refs, memory, shapes,
                        collect_aux=False):
        """Confidence and control point coordinates per composite query."""
        states = self._decode(self.loc_layers, queries, instance_refs, memory,
                              shapes, collect_aux)
        clipped = np.clip(instance_refs, 1e-6, 1.0 - 1e-6)
        ref_logit = np.log(clipped) - np.log1p(-clipped)
        results = []
        for x in states:
            pooled = x.mean(axis=1)
            conf = ops.sigmoid(ops.reshape(self.confidence_head(pooled), (-1,)))
            offsets = self.coord_head(x)
            coords = ops.sigmoid(
                offsets + ref_logit[:, None, :].astype(offsets.data.dtype))
            results.append((conf, coords))
        return results

    def decode_character(self, instance_refs, memory, shapes, collect_aux=False):
        """Character logits per instance; reference points shared with location."""
        q, m, d = self.cfg.num_queries, self.cfg.max_text_len, self.cfg.d_model
        base = ops.reshape(self.char_embed, (1, 1, d)) + Tensor(
            self._char_pe[None, :, :], dtype=self._dtype)
        queries = ops.broadcast_to(base, (q, m, d))
        states = self._decode(self.char_layers, queries, instance_refs, memory,
                              shapes, collect_aux)
        return [self.char_head(x) for x in states]

    def forward(self, image, collect_aux=None):
        """Everything the losses need: predictions, proposals, references."""
        if collect_aux is None:
            collect_aux = self.cfg.aux_loss
        image = ops.as_tensor(image)
        memory, shapes, token_refs = self.encode(image)
        prop_scores, prop_boxes = self.generate_guidance(memory, token_refs)
        queries, instance_refs = self.build_queries(prop_boxes)
        loc_outputs = self.decode_location(queries, instance_refs, memory, shapes,
                                           collect_aux)
        char_outputs = self.decode_character(instance_refs, memory, shapes,
                                             collect_aux)
        conf, coords = loc_outputs[-1]
        return {
            "confidence": conf,                # [Q]
            "ctrl_points": coords,             # [Q, N, 2]
            "char_logits": char_outputs[-1],   # [Q, M, V+1]
            "proposal_scores": prop_scores,    # [Q]
            "proposal_boxes": prop_boxes,      # [Q, 4]
            "reference_points": instance_refs, # [Q, 2] (shared by both decoders)
            "aux": [{"confidence": c, "ctrl_points": p, "char_logits": cl}
                    for (c, p), cl in zip(loc_outputs[:-1], char_outputs[:-1])],
        }

    __call__ = forward

    def predict(self, image, threshold: float = 0.5):
        """Detections as (polygon_pixels, text, score); no post-processing.

        Characters are per-slot argmax with PAD slots dropped; bezier
        outputs are converted to 16-gons. Polygons are in absolute pixel
        coordinates of the input image.
        """
        arr = np.asarray(image)
        if arr.ndim == 3 and arr.shape[2] == 3 and arr.dtype == np.uint8:
            arr = preprocess_image(arr, self._dtype)
        h, w = arr.shape[-2:]
        out = self.forward(arr, collect_aux=False)
        scores = out["confidence"].data
        coords = out["ctrl_points"].data
        logits = out["char_logits"].data
        keep = np.flatnonzero(scores >= threshold)
        results = []
        for j in keep:
            pts = coords[j].astype(np.float64)
            if self.cfg.mode == "bezier":
                poly = bezier_to_polygon(ControlPointSet(pts, "bezier"))
            else:
                poly = pts
            poly = poly * np.array([w, h], dtype=np.float64)
            classes = logits[j].argmax(axis=-1)
            text = "".join(self.cfg.alphabet[c] for c in classes
                           if c != self.cfg.pad_index)
            results.append((poly, text, float(scores[j])))
        return results

    # -- persistence ----------------------------------------------------

    def save(self, path):
        tensors = dict(self.named_parameters())
        save_checkpoint(path, tensors, {"model": self.cfg.to_dict()})

    @classmethod
    def load(cls, path, dtype: str = "f32"):
        arrays, config = load_checkpoint(path)
        if not config or "model" not in config:
            raise ValueError(f"{path}: checkpoint carries no model config")
        model = cls(ModelConfig.from_dict(config["model"]), dtype=dtype)
        model.load_arrays(arrays)
        return model
