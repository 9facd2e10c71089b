"""Desk-scale vision-language transformer.

Parameters live in one flat ``name -> Tensor`` mapping with hierarchical
names (``visual.layers.0.attn.q.weight``).  Forward functions take the mapping
explicitly so momentum replicas can reuse the same code with their own
weights.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_ID, CLS_ID, MASK_ID, ANS_ID, END_ID, SEP_ID = range(6)
NEG_INF = -1e9

COMPONENTS = ("visual", "text", "img_proj", "txt_proj", "fusion", "itm_head", "mlm_head", "decoder")
MOMENTUM_COMPONENTS = ("visual", "img_proj", "text", "txt_proj")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    width: int = 32
    heads: int = 4
    visual_depth: int = 4
    text_depth: int = 2
    fusion_depth: int = 2
    decoder_depth: int = 2
    mlp_hidden: int = 64
    embed_dim: int = 16
    vocab_size: int = 48
    image_size: int = 8
    patch: int = 2
    max_text_len: int = 25
    max_answer_len: int = 8
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.visual_depth != 2 * self.text_depth:
            raise ValueError("visual depth must be twice the text depth")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.image_size % self.patch:
            raise ValueError("image size must be a multiple of the patch size")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch) ** 2


# ------------------------------------------------------------ initialization

class _Init:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.out: dict[str, Tensor] = {}

    def _put(self, name, arr):
        self.out[name] = Tensor(arr, requires_grad=True, name=name)

    def linear(self, name, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        self._put(name + ".weight", self.rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        self._put(name + ".bias", np.zeros(fan_out))

    def embed(self, name, *shape):
        self._put(name, self.rng.normal(0.0, 0.02, size=shape))

    def norm(self, name, d):
        self._put(name + ".gamma", np.ones(d))
        self._put(name + ".beta", np.zeros(d))

    def attn(self, name, d):
        for part in "qkvo":
            self.linear(f"{name}.{part}", d, d)

    def block(self, name, cfg: ModelConfig, cross: bool):
        d = cfg.width
        self.norm(name + ".ln1", d)
        self.attn(name + ".attn", d)
        if cross:
            self.norm(name + ".ln_c", d)
            self.attn(name + ".cross", d)
        self.norm(name + ".ln2", d)
        self.linear(name + ".mlp.fc1", d, cfg.mlp_hidden)
        self.linear(name + ".mlp.fc2", cfg.mlp_hidden, d)


def init_params(cfg: ModelConfig, seed: int, components=COMPONENTS) -> dict[str, Tensor]:
    """Seeded parameters for the requested components.

    Each component draws from its own Philox stream keyed by ``(seed, index)``
    so adding or dropping one component leaves the others unchanged.
    """
    params: dict[str, Tensor] = {}
    d = cfg.width
    for comp in components:
        idx = COMPONENTS.index(comp)
        init = _Init(np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 101, idx]))))
        if comp == "visual":
            init.linear("visual.patch_embed", cfg.patch * cfg.patch, d)
            init.embed("visual.cls", d)
            init.embed("visual.pos", cfg.num_patches + 1, d)
            for i in range(cfg.visual_depth):
                init.block(f"visual.layers.{i}", cfg, cross=False)
            init.norm("visual.ln_f", d)
        elif comp == "text":
            init.embed("text.tok_embed", cfg.vocab_size, d)
            init.embed("text.pos", cfg.max_text_len, d)
            for i in range(cfg.text_depth):
                init.block(f"text.layers.{i}", cfg, cross=False)
            init.norm("text.ln_f", d)
        elif comp in ("img_proj", "txt_proj"):
            init.linear(comp, d, cfg.embed_dim)
        elif comp == "fusion":
            for i in range(cfg.fusion_depth):
                init.block(f"fusion.layers.{i}", cfg, cross=True)
            init.norm("fusion.ln_f", d)
        elif comp == "itm_head":
            init.linear("itm_head", d, 2)
        elif comp == "mlm_head":
            init.linear("mlm_head", d, cfg.vocab_size)
        elif comp == "decoder":
            init.embed("decoder.tok_embed", cfg.vocab_size, d)
            init.embed("decoder.pos", cfg.max_answer_len, d)
            for i in range(cfg.decoder_depth):
                init.block(f"decoder.layers.{i}", cfg, cross=True)
            init.norm("decoder.ln_f", d)
            init.linear("decoder.head", d, cfg.vocab_size)
        else:
            raise ValueError(f"unknown component {comp!r}")
        params.update(init.out)
    return params


# ------------------------------------------------------------------- layers

def _linear(p, name, x):
    return ad.linear(x, p[name + ".weight"], p[name + ".bias"])


def _norm(p, name, x, eps):
    return ad.layer_norm(x, p[name + ".gamma"], p[name + ".beta"], eps)


def _split_heads(x, heads):
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _attention(p, name, xq, xkv, bias, heads, key_keep=None):
    """Multi-head attention.  ``bias`` is added to the scores; ``key_keep``
    multiplies the attention weights (0 removes a key outright)."""
    b, tq, d = xq.shape
    q = _split_heads(_linear(p, name + ".q", xq), heads)
    k = _split_heads(_linear(p, name + ".k", xkv), heads)
    v = _split_heads(_linear(p, name + ".v", xkv), heads)
    ctx = ad.attention(q, k, v, bias, key_keep, 1.0 / math.sqrt(d // heads))
    out = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    return _linear(p, name + ".o", out)


def _mlp(p, name, x):
    return _linear(p, name + ".fc2", ad.gelu(_linear(p, name + ".fc1", x)))


def _self_attention(p, name, x, bias, cfg):
    h = _norm(p, name + ".ln1", x, cfg.ln_eps)
    return _attention(p, name + ".attn", h, h, bias, cfg.heads)


def _block(p, name, x, bias, cfg):
    """Pre-norm encoder block: self-attention then MLP, both residual."""
    x = x + _self_attention(p, name, x, bias, cfg)
    return x + _mlp(p, name + ".mlp", _norm(p, name + ".ln2", x, cfg.ln_eps))


def key_bias(valid: np.ndarray) -> Tensor:
    """Additive attention bias ``(B, 1, 1, T)`` from a ``(B, T)`` validity mask."""
    return Tensor(np.where(valid, 0.0, NEG_INF)[:, None, None, :])


def causal_bias(t: int) -> Tensor:
    return Tensor(np.triu(np.full((t, t), NEG_INF), k=1))


# -------------------------------------------------------------------- model

class MultiModalModel:
    """Visual encoder, text encoder, fusion encoder, heads and answer decoder."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, with_decoder: bool = True):
        self.config = config or ModelConfig()
        comps = COMPONENTS if with_decoder else COMPONENTS[:-1]
        self.seed = seed
        self.params: dict[str, Tensor] = init_params(self.config, seed, comps)

    # ---- parameter bookkeeping
    def names(self, component: str) -> list[str]:
        return [n for n in self.params if n.split(".", 1)[0] == component]

    @property
    def has_decoder(self) -> bool:
        return "decoder.head.weight" in self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    # ---- encoders
    def patchify(self, images) -> Tensor:
        cfg = self.config
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim == 2:
            images = ad.reshape(images, (1,) + images.shape)
        if images.ndim != 3 or images.shape[1:] != (cfg.image_size, cfg.image_size):
            raise ValueError(f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}),"
                             f" got {images.shape}")
        b, s, g = images.shape[0], cfg.image_size // cfg.patch, cfg.patch
        x = ad.reshape(images, (b, s, g, s, g))
        x = ad.transpose(x, (0, 1, 3, 2, 4))
        return ad.reshape(x, (b, s * s, g * g))

    def encode_image(self, images, params: Mapping[str, Tensor] | None = None):
        """Return ``(cls_embedding (B, D), tokens (B, P+1, D))``."""
        p = self.params if params is None else params
        cfg = self.config
        patches = self.patchify(images)
        b = patches.shape[0]
        x = _linear(p, "visual.patch_embed", patches)
        cls = ad.reshape(p["visual.cls"], (1, 1, cfg.width)) * Tensor(np.ones((b, 1, 1)))
        x = ad.concat([cls, x], axis=1) + p["visual.pos"]
        for i in range(cfg.visual_depth):
            x = _block(p, f"visual.layers.{i}", x, None, cfg)
        x = _norm(p, "visual.ln_f", x, cfg.ln_eps)
        return x[:, 0, :], x

    def encode_text(self, ids, params: Mapping[str, Tensor] | None = None):
        """Return ``(cls_embedding, tokens, valid)`` for ``(B, T)`` ids with [CLS] first."""
        p = self.params if params is None else params
        cfg = self.config
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if ids.shape[1] > cfg.max_text_len:
            raise ValueError(f"text length {ids.shape[1]} exceeds {cfg.max_text_len} positions")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise IndexError(f"token id out of range for vocabulary of {cfg.vocab_size}")
        valid = ids != PAD_ID
        t = ids.shape[1]
        x = ad.embedding(p["text.tok_embed"], ids) + p["text.pos"][:t]
        bias = key_bias(valid)
        for i in range(cfg.text_depth):
            x = _block(p, f"text.layers.{i}", x, bias, cfg)
        x = _norm(p, "text.ln_f", x, cfg.ln_eps)
        return x[:, 0, :], x, valid

    def project(self, cls, which: str, params=None) -> Tensor:
        """Unit-normalized contrastive embedding via ``img_proj`` or ``txt_proj``."""
        p = self.params if params is None else params
        z = _linear(p, which, cls)
        return z / ad.l2_norm(z, axis=-1, keepdims=True)

    def fuse(self, image_tokens, text_tokens, text_valid, image_mask=None, use_image: bool = True):
        """Text-side fusion with cross-attention to image tokens.

        ``image_mask`` ``(B, P+1)`` removes image tokens from cross-attention;
        a row with no visible token drops the cross-attention branch for that
        sample.  ``use_image=False`` skips cross-attention entirely.
        """
        p, cfg = self.params, self.config
        if image_tokens.shape[-1] != text_tokens.shape[-1]:
            raise ValueError(f"width mismatch: image {image_tokens.shape} vs text {text_tokens.shape}")
        if image_tokens.shape[0] != text_tokens.shape[0]:
            raise ValueError("image and text batches differ in size")
        keep = gate = None
        if image_mask is not None:
            image_mask = np.asarray(image_mask, dtype=np.float64)
            keep = Tensor(image_mask[:, None, None, :])
            gate = Tensor((image_mask.sum(axis=1) > 0).astype(np.float64)[:, None, None])
        bias = key_bias(text_valid)
        x = text_tokens
        for i in range(cfg.fusion_depth):
            name = f"fusion.layers.{i}"
            x = x + _self_attention(p, name, x, bias, cfg)
            if use_image:
                h = _attention(p, name + ".cross", _norm(p, name + ".ln_c", x, cfg.ln_eps),
                               image_tokens, None, cfg.heads, keep)
                x = x + (h * gate if gate is not None else h)
            x = x + _mlp(p, name + ".mlp", _norm(p, name + ".ln2", x, cfg.ln_eps))
        return _norm(p, "fusion.ln_f", x, cfg.ln_eps)

    def itm_logits(self, fused) -> Tensor:
        return _linear(self.params, "itm_head", fused[:, 0, :])

    def mlm_logits(self, states) -> Tensor:
        return _linear(self.params, "mlm_head", states)

    # ---- answer decoder
    def decode_answer(self, joint, joint_valid, prefix_ids) -> Tensor:
        """Next-token logits ``(B, L, V)`` for an answer prefix starting with [ANS]."""
        if not self.has_decoder:
            raise RuntimeError("model was built without an answer decoder")
        p, cfg = self.params, self.config
        prefix_ids = np.atleast_2d(np.asarray(prefix_ids, dtype=np.int64))
        length = prefix_ids.shape[1]
        if length > cfg.max_answer_len:
            raise ValueError(f"answer prefix of {length} exceeds {cfg.max_answer_len} tokens")
        if not (prefix_ids[:, 0] == ANS_ID).all():
            raise ValueError("answer prefix must begin with the answer-start token")
        x = ad.embedding(p["decoder.tok_embed"], prefix_ids) + p["decoder.pos"][:length]
        self_bias = causal_bias(length)
        ctx_bias = key_bias(joint_valid)
        for i in range(cfg.decoder_depth):
            name = f"decoder.layers.{i}"
            x = x + _self_attention(p, name, x, self_bias, cfg)
            x = x + _attention(p, name + ".cross", _norm(p, name + ".ln_c", x, cfg.ln_eps),
                               joint, ctx_bias, cfg.heads)
            x = x + _mlp(p, name + ".mlp", _norm(p, name + ".ln2", x, cfg.ln_eps))
        x = _norm(p, "decoder.ln_f", x, cfg.ln_eps)
        return _linear(p, "decoder.head", x)

    def joint_representation(self, images, question_ids):
        _, img_tokens = self.encode_image(images)
        _, txt_tokens, valid = self.encode_text(question_ids)
        return self.fuse(img_tokens, txt_tokens, valid), valid

    def greedy_decode(self, images, question_ids, max_len: int | None = None) -> list[list[int]]:
        """Greedy answers (without [ANS]/[END]) for a batch of image-question pairs."""
        max_len = max_len or self.config.max_answer_len
        with ad.no_grad():
            joint, valid = self.joint_representation(images, question_ids)
            b = joint.shape[0]
            prefix = np.full((b, 1), ANS_ID, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            while prefix.shape[1] < max_len and not done.all():
                logits = self.decode_answer(joint, valid, prefix).data[:, -1, :]
                nxt = logits.argmax(axis=-1)
                nxt = np.where(done, PAD_ID, nxt)
                done |= nxt == END_ID
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        answers = []
        for row in prefix[:, 1:]:
            out = []
            for tok in row:
                if tok in (END_ID, PAD_ID):
                    break
                out.append(int(tok))
            answers.append(out)
        return answers


# ------------------------------------------------------------ momentum copies

class MomentumCopies:
    """EMA replicas of the visual/text encoders and their projections."""

    def __init__(self, model: MultiModalModel, momentum: float = 0.995):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        self.momentum = momentum
        self.params: dict[str, Tensor] = {
            n: Tensor(p.data.copy(), name=n) for n, p in model.params.items()
            if n.split(".", 1)[0] in MOMENTUM_COMPONENTS}

    def update(self, model: MultiModalModel) -> None:
        m = self.momentum
        for n, c in self.params.items():
            live = model.params.get(n)
            if live is None or live.shape != c.shape:
                raise ValueError(f"momentum copy {n!r} has no matching live parameter")
            c.data[...] = m * c.data + (1.0 - m) * live.data


def momentum_update(model: MultiModalModel, copies: MomentumCopies) -> MomentumCopies:
    copies.update(model)
    return copies


# -------------------------------------------------------------- checkpoints

MANIFEST_KEY = "__manifest__"


def save_checkpoint(model: MultiModalModel, path, extra: dict | None = None) -> Path:
    """Write every parameter as little-endian float64 plus a JSON manifest.

    The file is a numpy ``.npz`` archive; parameter arrays keep their names and
    shapes, and ``__manifest__`` holds the architecture hyperparameters.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "ggpvqa-checkpoint/1", "model": asdict(model.config), **(extra or {})}
    arrays = {n: p.data.astype("<f8") for n, p in model.params.items()}
    arrays[MANIFEST_KEY] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as z:
        manifest = json.loads(z[MANIFEST_KEY].tobytes().decode())
        arrays = {n: z[n].astype(np.float64) for n in z.files if n != MANIFEST_KEY}
    return manifest, arrays


def load_checkpoint(model: MultiModalModel, path) -> list[str]:
    """Load parameters by name with strict shape checks.

    Decoder parameters missing from the file keep their fresh initialization;
    their names are returned.  Any other mismatch raises
    :class:`CheckpointError` naming every offending parameter.
    """
    manifest, arrays = read_checkpoint(path)
    if manifest.get("model") != asdict(model.config):
        raise CheckpointError(f"architecture mismatch: checkpoint {manifest.get('model')} "
                              f"vs model {asdict(model.config)}")
    problems = []
    for n, arr in arrays.items():
        if n not in model.params:
            problems.append(f"{n}: not a model parameter")
        elif arr.shape != model.params[n].shape:
            problems.append(f"{n}: shape {arr.shape} vs {model.params[n].shape}")
    fresh = [n for n in model.params if n not in arrays]
    problems += [f"{n}: missing from checkpoint" for n in fresh if not n.startswith("decoder.")]
    if problems:
        raise CheckpointError("checkpoint mismatch:\n  " + "\n  ".join(problems))
    for n, arr in arrays.items():
        model.params[n].data[...] = arr
    return fresh
