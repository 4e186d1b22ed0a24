"""Image-text InfoNCE alignment loss with learnable temperature.

The batch similarity matrix t * F G^T is scored with a symmetric pair of
cross-entropies (rows: image -> text, columns: text -> image), averaged
over the batch and halved:

    L = -(1/2B) sum_i [log softmax_row(t F G^T)_ii + log softmax_col(t F G^T)_ii]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TEMP_INIT = float(np.log(1.0 / 0.07))  # customary contrastive init


@dataclass
class ContrastiveState:
    """Holds the learnable log-temperature; t = exp(log_temperature) > 0."""

    log_temperature: Tensor

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature.data))


def init_contrastive_state(dtype=np.float32) -> ContrastiveState:
    return ContrastiveState(
        log_temperature=Tensor(np.asarray(TEMP_INIT, dtype=dtype), requires_grad=True)
    )


def normalize_pair(image_feat, text_feat) -> tuple[Tensor, Tensor]:
    """Unit-normalize an (image, text) feature pair; zero vectors rejected."""
    image_feat, text_feat = ad.Tensor(image_feat), ad.Tensor(text_feat)
    for name, t in (("image", image_feat), ("text", text_feat)):
        norms = np.sqrt(np.sum(np.asarray(t.data) ** 2, axis=-1))
        if np.any(norms == 0):
            raise ValueError(f"cannot normalize a zero {name} feature vector")
    return ad.l2_normalize(image_feat, axis=-1), ad.l2_normalize(text_feat, axis=-1)


def contrastive_loss(f: Tensor, g: Tensor, t) -> Tensor:
    """Symmetric InfoNCE over unit-row matrices f, g (both B x J).

    ``t`` is the temperature, either a scalar tensor (gradient flows to it)
    or a plain float.
    """
    f, g = ad.Tensor(f) if not isinstance(f, Tensor) else f, (
        ad.Tensor(g) if not isinstance(g, Tensor) else g
    )
    if f.shape != g.shape:
        raise ad.ShapeError(f"contrastive_loss: shape mismatch {f.shape} vs {g.shape}")
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValueError(f"expected non-empty (B, J) matrices, got {f.shape}")
    for name, m in (("image", f), ("text", g)):
        err = np.max(np.abs(np.sum(np.asarray(m.data) ** 2, axis=1) - 1.0))
        if err > 2e-4:  # allows 1e-4 deviation of the norm itself
            raise ValueError(f"{name} rows must be unit-norm within 1e-4 (max sq err {err:.2e})")
    b = f.shape[0]
    sim = ad.matmul(f, ad.transpose(g))
    logits = ad.mul(sim, t) if isinstance(t, Tensor) else ad.scalar_mul(sim, float(t))
    diag = ad.sum_(ad.mul(logits, Tensor(np.eye(b, dtype=np.asarray(f.data).dtype))), axis=1)
    row_lse = ad.logsumexp(logits, axis=1)
    col_lse = ad.logsumexp(logits, axis=0)
    total = ad.sub(ad.add(ad.sum_(row_lse), ad.sum_(col_lse)), ad.scalar_mul(ad.sum_(diag), 2.0))
    return ad.scalar_mul(total, 1.0 / (2.0 * b))
