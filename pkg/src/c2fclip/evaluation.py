"""Zero-shot retrieval and classification over embedding matrices."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .tensor import no_grad


@dataclass
class RetrievalMetrics:
    i2t: dict[int, float] = field(default_factory=dict)
    t2i: dict[int, float] = field(default_factory=dict)
    n_queries: int = 0

    def as_rows(self) -> list[tuple[str, int, float]]:
        return ([("i2t", k, v) for k, v in sorted(self.i2t.items())]
                + [("t2i", k, v) for k, v in sorted(self.t2i.items())])


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def match_ranks(sims: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal entry within each row.

    Items scoring strictly higher rank first; equal scores are ordered by
    gallery index, so ties resolve deterministically.
    """
    sims = np.asarray(sims)
    n = sims.shape[0]
    target = sims[np.arange(n), np.arange(n)][:, None]
    better = (sims > target).sum(axis=1)
    lower_tied = ((sims == target) & (np.arange(sims.shape[1])[None, :] < np.arange(n)[:, None])).sum(axis=1)
    return better + lower_tied + 1


def retrieval_recall(img_embs, txt_embs, ks=(1, 5, 10)) -> RetrievalMetrics:
    """Percentage of queries whose paired item ranks within the top ``k``.

    Row ``i`` of both matrices is the ground-truth pair.  ``k`` larger than
    the gallery is reported at the gallery size.
    """
    img, txt = _as_array(img_embs), _as_array(txt_embs)
    if img.shape != txt.shape:
        raise ValueError(f"embedding matrices differ in shape: {img.shape} vs {txt.shape}")
    n = img.shape[0]
    sims = img @ txt.T
    r_i2t, r_t2i = match_ranks(sims), match_ranks(sims.T)
    out = RetrievalMetrics(n_queries=n)
    for k in ks:
        kk = min(int(k), n)
        out.i2t[int(k)] = 100.0 * float(np.mean(r_i2t <= kk))
        out.t2i[int(k)] = 100.0 * float(np.mean(r_t2i <= kk))
    return out


def class_embeddings(class_prompts, model, max_len: int = D.MAX_TEXT_LEN) -> np.ndarray:
    if not class_prompts:
        raise ValueError("zero-shot classification needs at least one class")
    flat, owner = [], []
    for c, prompts in enumerate(class_prompts):
        if not prompts:
            raise ValueError(f"class {c} has no prompts")
        flat.extend(prompts)
        owner.extend([c] * len(prompts))
    tokens, lengths = D.tokenize_batch(flat, max_len)
    with no_grad():
        emb = model.encode_text(tokens, lengths).data
    owner = np.asarray(owner)
    means = np.stack([emb[owner == c].mean(axis=0) for c in range(len(class_prompts))])
    return means / np.sqrt((means * means).sum(axis=1, keepdims=True) + 1e-12)


def nearest_class(img_embs, class_embs) -> np.ndarray:
    """Argmax cosine similarity; ``np.argmax`` keeps the lowest index on ties."""
    return np.argmax(_as_array(img_embs) @ _as_array(class_embs).T, axis=1)


def zero_shot_classify(img_embs, class_prompts, model) -> np.ndarray:
    return nearest_class(img_embs, class_embeddings(class_prompts, model))


def embed_images(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    size = model.image_size
    if images.shape[1] != size:
        images = D.resize_to(images, size, model.image_cfg.patch_size)
    with no_grad():
        return np.concatenate([model.encode_image(images[i:i + batch_size]).data
                               for i in range(0, len(images), batch_size)])


def embed_texts(model, tokens, lengths, batch_size: int = 512) -> np.ndarray:
    with no_grad():
        return np.concatenate([model.encode_text(tokens[i:i + batch_size], lengths[i:i + batch_size]).data
                               for i in range(0, len(tokens), batch_size)])


def evaluate(model, corpus: D.Corpus, ks=(1, 5, 10)) -> dict:
    """Held-out retrieval recall and zero-shot accuracy at the model's resolution."""
    rec = retrieval_recall(embed_images(model, corpus.eval.images),
                           embed_texts(model, corpus.eval.tokens, corpus.eval.lengths), ks)
    preds = zero_shot_classify(embed_images(model, corpus.classify.images), D.class_prompts(), model)
    acc = 100.0 * float(np.mean(preds == corpus.classify.labels))
    return {"retrieval": rec, "zs_acc": acc, "r1_i2t": rec.i2t.get(1, float("nan")),
            "r1_t2i": rec.t2i.get(1, float("nan"))}
