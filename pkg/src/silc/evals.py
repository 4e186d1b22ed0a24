"""Evaluation suite: zero-shot classification, few-shot probing, retrieval
recall, and zero-shot segmentation with mIOU.

All evaluation is read-only over frozen parameters.  Class prompts use the
fixed template "a photo of a {color} {shape}", which is inside the caption
grammar of the synthetic dataset.  Segmentation assigns each patch the
class whose prompt embedding has the highest cosine similarity with the
patch embedding, upsamples to pixels by nearest neighbor, and scores mIOU
with background pixels excluded from both intersection and union.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import DatasetConfig, SyntheticDataset, class_names, full_resized_images, tokenize
from .encoders import text_forward, vision_forward
from .rng import Stream, derive

PROMPT_TEMPLATE = "a photo of a {name}"


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    metric: str
    value: float
    dataset: str
    step: int
    config_hash: str

    def row(self) -> str:
        return f"{self.metric},{self.value:.6f},{self.dataset},{self.step},{self.config_hash}"


REPORT_COLUMNS = ("metric", "value", "dataset", "step", "config_hash")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / (n + 1e-12)


@dataclass
class ClassPromptSet:
    names: list[str]
    embeddings: np.ndarray  # (C, J), unit rows


def build_class_prompts(params: dict, text_cfg, data_cfg: DatasetConfig) -> ClassPromptSet:
    names = class_names(data_cfg)
    tokens = np.stack(
        [tokenize(PROMPT_TEMPLATE.format(name=n), data_cfg.max_len) for n in names]
    )
    with ad.no_grad():
        emb = text_forward(params, text_cfg, tokens).data
    return ClassPromptSet(names=names, embeddings=_unit_rows(np.asarray(emb)))


def embed_images(params: dict, image_cfg, images: np.ndarray, want_patches=False, batch=128):
    """Pooled (N, J) and optional patch (N, n, J) embeddings, plain numpy."""
    pooled, patches = [], []
    with ad.no_grad():
        for lo in range(0, len(images), batch):
            fwd = vision_forward(params, image_cfg, images[lo : lo + batch], "global", want_patches)
            pooled.append(np.asarray(fwd.pooled.data))
            if want_patches:
                patches.append(np.asarray(fwd.patch_embeddings.data))
    pooled = np.concatenate(pooled)
    return (pooled, np.concatenate(patches)) if want_patches else (pooled, None)


def zero_shot_classify(image_embedding: np.ndarray, prompts: ClassPromptSet) -> int:
    """Argmax cosine similarity against class prompts; ties -> lowest id."""
    if len(prompts.names) == 0:
        raise EvalError("prompt set is empty")
    sims = _unit_rows(np.atleast_2d(image_embedding)) @ prompts.embeddings.T
    return int(np.argmax(sims[0]))


def zero_shot_accuracy(image_embs: np.ndarray, labels: np.ndarray, prompts: ClassPromptSet) -> float:
    """Batch accuracy of zero-shot classification; labels are 0-based class ids."""
    sims = _unit_rows(image_embs) @ prompts.embeddings.T
    pred = sims.argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


def few_shot_probe(
    support_feats, test_feats: np.ndarray, test_labels: np.ndarray, k: int, seed: int = 0
) -> float:
    """Nearest-class-mean over unit-normalized embeddings with k shots/class.

    ``support_feats`` is a sequence indexed by class id of (n_c, J) arrays.
    """
    if k < 1:
        raise EvalError(f"shot count must be >= 1, got {k}")
    stream = Stream(derive(seed, "few_shot", k))
    means = []
    for cid, feats in enumerate(support_feats):
        feats = np.asarray(feats)
        if feats.shape[0] < k:
            raise EvalError(f"class {cid} has only {feats.shape[0]} support examples, need {k}")
        pick = stream.randint(k, feats.shape[0]) if feats.shape[0] > k else np.arange(k)
        means.append(_unit_rows(feats[pick]).mean(axis=0))
    proto = _unit_rows(np.stack(means))
    pred = (_unit_rows(np.asarray(test_feats)) @ proto.T).argmax(axis=1)
    return float((pred == np.asarray(test_labels)).mean())


def retrieval_recall_at_1(image_embs: np.ndarray, text_embs: np.ndarray) -> tuple[float, float]:
    """Top-1 retrieval in both directions; row i of each matrix is a true pair."""
    image_embs, text_embs = np.asarray(image_embs), np.asarray(text_embs)
    if image_embs.shape != text_embs.shape:
        raise EvalError(f"shape mismatch: {image_embs.shape} vs {text_embs.shape}")
    n = image_embs.shape[0]
    if n == 0:
        raise EvalError("retrieval needs at least one pair")
    sims = _unit_rows(image_embs) @ _unit_rows(text_embs).T
    i2t = float((sims.argmax(axis=1) == np.arange(n)).mean())
    t2i = float((sims.argmax(axis=0) == np.arange(n)).mean())
    return i2t, t2i


def zero_shot_segment(
    patch_embs: np.ndarray, prompts: ClassPromptSet, out_size: int
) -> np.ndarray:
    """Per-patch argmax over prompt cosine -> nearest-neighbor pixel map.

    Returns an (out_size, out_size) int32 map of 1-based class ids
    (matching the dataset convention where 0 is background; background is
    never predicted).  No post-refinement is applied.
    """
    patch_embs = np.asarray(patch_embs)
    n = patch_embs.shape[0]
    grid = int(round(np.sqrt(n)))
    if grid * grid != n:
        raise EvalError(f"patch count {n} is not a square grid")
    sims = _unit_rows(patch_embs) @ prompts.embeddings.T
    pred = sims.argmax(axis=1).astype(np.int32).reshape(grid, grid) + 1
    scale = out_size // grid
    if scale * grid != out_size:
        idx = (np.arange(out_size) * grid) // out_size
        return pred[idx][:, idx]
    return np.repeat(np.repeat(pred, scale, axis=0), scale, axis=1)


def miou(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> float:
    """Mean over classes present in truth of |pred & truth| / |pred | truth|."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ad.ShapeError(f"miou: shape mismatch {pred.shape} vs {truth.shape}")
    ious = []
    for c in np.unique(truth):
        if c >= n_classes:
            raise EvalError(f"class id {c} out of range for n_classes={n_classes}")
        p, t = pred == c, truth == c
        union = (p | t).sum()
        ious.append((p & t).sum() / union if union else 1.0)
    return float(np.mean(ious))


def segmentation_miou(
    preds, truths, n_classes: int, background: int = 0
) -> float:
    """Dataset-level mIOU with background ground-truth pixels excluded.

    Intersections and unions accumulate per class over all images (TCL-style
    protocol without the background class); pixels whose ground truth is
    background are dropped entirely.
    """
    inter = np.zeros(n_classes + 1, dtype=np.int64)
    union = np.zeros(n_classes + 1, dtype=np.int64)
    for pred, truth in zip(preds, truths):
        pred, truth = np.asarray(pred), np.asarray(truth)
        valid = truth != background
        p, t = pred[valid], truth[valid]
        for c in range(1, n_classes + 1):
            pc, tc = p == c, t == c
            inter[c] += (pc & tc).sum()
            union[c] += (pc | tc).sum()
    present = union > 0
    if not present.any():
        return 0.0
    return float((inter[present] / union[present]).mean())


def downsample_mask(mask: np.ndarray, out_size: int) -> np.ndarray:
    """Nearest-neighbor downsample of an int mask to (out_size, out_size)."""
    s = mask.shape[0]
    idx = ((np.arange(out_size) + 0.5) * s / out_size).astype(np.int64)
    return mask[idx][:, idx]


# ---------------------------------------------------------------------------
# suite runner over a frozen model
# ---------------------------------------------------------------------------


def eval_params(state_params: dict, teacher=None) -> dict:
    """Parameters used for evaluation: EMA image tower when one exists."""
    if teacher is None:
        return state_params
    merged = dict(state_params)
    for name, t in teacher.params.items():
        if name.startswith("img."):
            merged[name] = t
    return merged


def run_suite(
    suite: str,
    params: dict,
    cfg,
    ds: SyntheticDataset,
    step: int = 0,
    cfg_hash: str = "",
    shots=(1, 5, 10),
) -> list[EvalReport]:
    """Run one named suite; 'all' runs everything."""
    suites = ("all", "zero_shot", "few_shot", "retrieval", "segmentation")
    if suite not in suites:
        raise EvalError(f"unknown suite {suite!r}; available: {', '.join(suites)}")
    reports: list[EvalReport] = []
    data_cfg = ds.cfg
    prompts = build_class_prompts(params, cfg.text, data_cfg)
    size = cfg.image.image_size

    def rep(metric, value, dataset):
        reports.append(EvalReport(metric, float(value), dataset, step, cfg_hash))

    if suite in ("all", "zero_shot", "few_shot", "segmentation"):
        test_idx = np.arange(ds.size("test"))
        test_images = full_resized_images(ds, "test", test_idx, size)
        test_labels = np.array(
            [ds.sample("test", int(i)).class_set[0] - 1 for i in test_idx]
        )
        want_patches = suite in ("all", "segmentation")
        pooled, patches = embed_images(params, cfg.image, test_images, want_patches)

    if suite in ("all", "zero_shot"):
        rep("zero_shot_acc", zero_shot_accuracy(pooled, test_labels, prompts), "test")

    if suite in ("all", "few_shot"):
        # first two thirds of the test split supply shots, the rest queries
        cut = len(test_labels) * 2 // 3
        support = [
            pooled[:cut][test_labels[:cut] == c] for c in range(data_cfg.n_classes)
        ]
        for k in shots:
            accs = [
                few_shot_probe(support, pooled[cut:], test_labels[cut:], k, seed=r)
                for r in range(5)
            ]
            rep(f"few_shot_{k}", float(np.mean(accs)), "test")

    if suite in ("all", "retrieval"):
        val_idx = np.arange(ds.size("val"))
        val_images = full_resized_images(ds, "val", val_idx, size)
        v_pooled, _ = embed_images(params, cfg.image, val_images)
        tokens = np.stack(
            [tokenize(ds.sample("val", int(i)).caption, data_cfg.max_len) for i in val_idx]
        )
        with ad.no_grad():
            v_text = np.asarray(text_forward(params, cfg.text, tokens).data)
        i2t, t2i = retrieval_recall_at_1(v_pooled, v_text)
        rep("retrieval_i2t_at_1", i2t, "val")
        rep("retrieval_t2i_at_1", t2i, "val")

    if suite in ("all", "segmentation"):
        preds = [zero_shot_segment(patches[i], prompts, size) for i in range(len(patches))]
        truths = [
            downsample_mask(ds.sample("test", int(i)).seg_mask, size) for i in test_idx
        ]
        rep("seg_miou", segmentation_miou(preds, truths, data_cfg.n_classes), "test")

    return reports
