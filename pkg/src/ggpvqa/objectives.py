"""Pre-training losses (ITC, ITM, MLM) and the answer-generation loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ANS_ID, CLS_ID, MASK_ID, PAD_ID, SEP_ID, END_ID, MomentumCopies, MultiModalModel

SPECIAL_IDS = frozenset({PAD_ID, CLS_ID, MASK_ID, ANS_ID, END_ID, SEP_ID})
NORM_TOL = 1e-6


class EmbeddingQueue:
    """Fixed-capacity ring buffer of unit-norm (image, text) embedding pairs."""

    def __init__(self, capacity: int = 256, dim: int = 16):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.dim = dim
        self.image = np.zeros((capacity, dim))
        self.text = np.zeros((capacity, dim))
        self.cursor = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def push(self, image: np.ndarray, text: np.ndarray) -> None:
        image = np.atleast_2d(image)
        text = np.atleast_2d(text)
        for arr in (image, text):
            if arr.shape[1] != self.dim:
                raise ValueError(f"expected embeddings of width {self.dim}, got {arr.shape}")
            _check_unit(arr, "queue entry")
        for i in range(image.shape[0]):
            if not self.capacity:
                return
            self.image[self.cursor] = image[i]
            self.text[self.cursor] = text[i]
            self.cursor = (self.cursor + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)

    def contents(self) -> tuple[np.ndarray, np.ndarray]:
        """Stored pairs, oldest first."""
        if self.count < self.capacity:
            sl = slice(0, self.count)
            return self.image[sl].copy(), self.text[sl].copy()
        order = np.r_[self.cursor:self.capacity, 0:self.cursor]
        return self.image[order], self.text[order]


def _check_unit(arr: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(arr, axis=-1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ValueError(f"{what} is not unit-normalized (norms {norms.min():.6g}..{norms.max():.6g})")


@dataclass
class LossBundle:
    itc: float = 0.0
    itm: float = 0.0
    mlm: float = 0.0
    weights: dict = field(default_factory=lambda: {"itc": 1.0, "itm": 1.0, "mlm": 1.0})

    @property
    def total(self) -> float:
        w = self.weights
        return w["itc"] * self.itc + w["itm"] * self.itm + w["mlm"] * self.mlm


# ------------------------------------------------------------------------ ITC

def itc_loss(img_emb: Tensor, txt_emb: Tensor, queue: EmbeddingQueue | None, temperature: float = 0.07,
             img_emb_m: np.ndarray | None = None, txt_emb_m: np.ndarray | None = None) -> Tensor:
    """Symmetric InfoNCE over in-batch plus queued candidates.

    Candidates on the key side are the momentum embeddings when given (no
    gradient), otherwise the live embeddings.  The batch's momentum (or
    detached live) embeddings are pushed onto the queue afterwards.
    """
    _check_unit(img_emb.data, "image embedding")
    _check_unit(txt_emb.data, "text embedding")
    n = img_emb.shape[0]
    img_keys = Tensor(img_emb_m) if img_emb_m is not None else img_emb
    txt_keys = Tensor(txt_emb_m) if txt_emb_m is not None else txt_emb
    if queue is not None and len(queue):
        q_img, q_txt = queue.contents()
        img_keys = ad.concat([img_keys, Tensor(q_img)], axis=0)
        txt_keys = ad.concat([txt_keys, Tensor(q_txt)], axis=0)
    inv_t = 1.0 / temperature
    targets = np.arange(n)
    i2t = ad.scale(ad.matmul(img_emb, ad.transpose(txt_keys)), inv_t)
    t2i = ad.scale(ad.matmul(txt_emb, ad.transpose(img_keys)), inv_t)
    loss = ad.scale(ad.softmax_cross_entropy(i2t, targets) + ad.softmax_cross_entropy(t2i, targets), 0.5)
    if queue is not None:
        queue.push(img_emb.data if img_emb_m is None else img_emb_m,
                   txt_emb.data if txt_emb_m is None else txt_emb_m)
    return loss


# ------------------------------------------------------------------------ ITM

def sample_negatives(n: int, rng: np.random.Generator) -> np.ndarray:
    """For each i, a caption index drawn uniformly from ``{0..n-1} \\ {i}``."""
    if n < 2:
        raise ValueError("image-text matching needs a batch of at least 2")
    j = rng.integers(0, n - 1, size=n)
    return j + (j >= np.arange(n))


def itm_loss(model: MultiModalModel, image_tokens: Tensor, text_tokens: Tensor, text_valid: np.ndarray,
             rng: np.random.Generator) -> Tensor:
    """Two-way cross-entropy over N matched and N in-batch mismatched pairs."""
    n = image_tokens.shape[0]
    neg = sample_negatives(n, rng)
    imgs = ad.concat([image_tokens, image_tokens], axis=0)
    txts = ad.concat([text_tokens, text_tokens[neg]], axis=0)
    valid = np.concatenate([text_valid, text_valid[neg]], axis=0)
    logits = model.itm_logits(model.fuse(imgs, txts, valid))
    labels = np.r_[np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)]
    return ad.softmax_cross_entropy(logits, labels)


# ------------------------------------------------------------------------ MLM

def mlm_mask(token_ids, mask_rate: float = 0.15, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Replace ``max(1, round(rate * maskable))`` tokens with [MASK].

    Works on one sequence ``(T,)`` or a batch ``(B, T)``.  Returns the masked
    ids and the masked positions as ``(k,)`` indices or ``(k, 2)`` (row, col)
    pairs.  Special tokens are never masked.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        masked, pos = _mask_row(ids, mask_rate, rng)
        return masked, pos
    rows, positions = [], []
    for b, row in enumerate(ids):
        masked, pos = _mask_row(row, mask_rate, rng)
        rows.append(masked)
        positions += [(b, int(p)) for p in pos]
    return np.stack(rows), np.array(positions, dtype=np.int64).reshape(-1, 2)


def _mask_row(row: np.ndarray, rate: float, rng) -> tuple[np.ndarray, np.ndarray]:
    maskable = np.flatnonzero(~np.isin(row, list(SPECIAL_IDS)))
    if maskable.size == 0:
        raise ValueError("sequence has no maskable tokens")
    k = max(1, int(np.floor(rate * maskable.size + 0.5)))
    pos = np.sort(rng.choice(maskable, size=k, replace=False))
    out = row.copy()
    out[pos] = MASK_ID
    return out, pos


def mlm_loss(model: MultiModalModel, image_tokens: Tensor, masked_ids: np.ndarray,
             target_positions: np.ndarray, original_ids: np.ndarray) -> Tensor:
    """Cross-entropy of the original tokens at masked positions, image-conditioned."""
    target_positions = np.asarray(target_positions, dtype=np.int64).reshape(-1, 2)
    if target_positions.size == 0:
        raise ValueError("no masked positions to score")
    _, txt_tokens, valid = model.encode_text(masked_ids)
    fused = model.fuse(image_tokens, txt_tokens, valid)
    rows, cols = target_positions[:, 0], target_positions[:, 1]
    logits = model.mlm_logits(fused[rows, cols])
    return ad.softmax_cross_entropy(logits, np.asarray(original_ids)[rows, cols])


# -------------------------------------------------------------- pre-training

@dataclass
class PretrainBatch:
    images: np.ndarray      # (B, 8, 8)
    captions: np.ndarray    # (B, T) padded ids
    masked: np.ndarray      # (B, T)
    mask_positions: np.ndarray  # (k, 2)
    itm_seed: int


def pretrain_loss(model: MultiModalModel, batch: PretrainBatch, queue: EmbeddingQueue | None,
                  momentum: MomentumCopies | None, temperature: float = 0.07,
                  weights: dict | None = None) -> tuple[Tensor, LossBundle]:
    """Weighted ITC + ITM + MLM for one batch.  Pushes onto ``queue``.

    Equivalent to calling :func:`itc_loss`, :func:`itm_loss` and
    :func:`mlm_loss` separately, but runs the caption and masked-caption
    encodings as one text pass and all fused pairs as one fusion pass.
    """
    bundle = LossBundle() if weights is None else LossBundle(weights=dict(weights))
    w = bundle.weights
    n = batch.images.shape[0]
    img_cls, img_tokens = model.encode_image(batch.images)
    both = np.concatenate([batch.captions, batch.masked], axis=0)
    cls_all, tok_all, valid_all = model.encode_text(both)
    txt_cls = cls_all[:n]
    txt_tokens, masked_tokens = tok_all[:n], tok_all[n:]
    valid, masked_valid = valid_all[:n], valid_all[n:]
    img_emb = model.project(img_cls, "img_proj")
    txt_emb = model.project(txt_cls, "txt_proj")
    img_m = txt_m = None
    if momentum is not None:
        with ad.no_grad():
            mi, _ = model.encode_image(batch.images, momentum.params)
            mt, _, _ = model.encode_text(batch.captions, momentum.params)
            img_m = model.project(mi, "img_proj", momentum.params).data
            txt_m = model.project(mt, "txt_proj", momentum.params).data
    l_itc = itc_loss(img_emb, txt_emb, queue, temperature, img_m, txt_m)

    neg = sample_negatives(n, np.random.default_rng(batch.itm_seed))
    fused = model.fuse(ad.concat([img_tokens] * 3, axis=0),
                       ad.concat([txt_tokens, txt_tokens[neg], masked_tokens], axis=0),
                       np.concatenate([valid, valid[neg], masked_valid], axis=0))
    labels = np.r_[np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)]
    l_itm = ad.softmax_cross_entropy(model.itm_logits(fused[:2 * n]), labels)
    pos = np.asarray(batch.mask_positions, dtype=np.int64).reshape(-1, 2)
    if pos.size == 0:
        raise ValueError("no masked positions to score")
    rows, cols = pos[:, 0], pos[:, 1]
    l_mlm = ad.softmax_cross_entropy(model.mlm_logits(fused[2 * n + rows, cols]),
                                     batch.captions[rows, cols])
    bundle.itc, bundle.itm, bundle.mlm = l_itc.item(), l_itm.item(), l_mlm.item()
    total = ad.scale(l_itc, w["itc"]) + ad.scale(l_itm, w["itm"]) + ad.scale(l_mlm, w["mlm"])
    return total, bundle


# ----------------------------------------------------------------------- VQA

def vqa_loss(model: MultiModalModel, images, question_ids, answer_ids) -> Tensor:
    """Teacher-forced causal cross-entropy over answer tokens.

    ``answer_ids`` rows are ``[ANS] ... [END]`` padded with [PAD]; the decoder
    reads all but the last position and predicts all but the first.
    """
    answer_ids = np.atleast_2d(np.asarray(answer_ids, dtype=np.int64))
    if answer_ids.shape[1] < 2:
        raise ValueError("answer must contain at least [ANS] and one target token")
    joint, valid = model.joint_representation(images, question_ids)
    logits = model.decode_answer(joint, valid, answer_ids[:, :-1])
    v = logits.shape[-1]
    targets = answer_ids[:, 1:].reshape(-1)
    return ad.softmax_cross_entropy(ad.reshape(logits, (-1, v)), targets, ignore_index=PAD_ID)
