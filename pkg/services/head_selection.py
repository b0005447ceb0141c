"""
Causal Influence Score head selection.

Every head mixes two branches with convex weights: beta1 on the clean token
stream and beta2 = 1 - beta1 on a patch-shuffled copy of it. beta1 is the
sigmoid of a free logit, so the pair always lies on the 1-simplex. With the
backbone frozen, only the logits are trained under the goal loss; heads that
end up leaning on the shuffled branch (CIS = beta2 - beta1 > tau) carry style
rather than shape and are marked non-causal.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from errors import ConfigurationError, ContractError, TrainingDivergedError
from models import CisReport, SelectionConfig
from services import autodiff as ad
from services.autodiff import SgdState, Tensor
from services.domains import DomainDataset
from services.stylization import make_sci_batch
from services.vit import NUM_SPECIAL_TOKENS, ViTModel

logger = logging.getLogger(__name__)


class BetaWeights:
    def __init__(self, num_blocks: int, heads_per_block: int, logits: Optional[np.ndarray] = None):
        data = np.zeros((num_blocks, heads_per_block)) if logits is None else np.asarray(logits, dtype=np.float64)
        self.logits = Tensor(data, requires_grad=True, name="beta_logits")

    @property
    def beta1(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data))

    @property
    def beta2(self) -> np.ndarray:
        return 1.0 - self.beta1

    def beta1_tensor(self) -> Tensor:
        return ad.sigmoid(self.logits)


@dataclass
class MixedTrace:
    """Per block, per head: (clean branch, shuffled branch, mixed output)."""

    heads: List[List[tuple]] = field(default_factory=list)


def random_patch_permutations(rng: np.random.Generator, batch: int, num_patches: int) -> np.ndarray:
    return np.stack([rng.permutation(num_patches) for _ in range(batch)])


def _token_permutation(patch_perm: np.ndarray) -> np.ndarray:
    """Lifts patch permutations to the full token axis; class/style tokens stay put."""
    batch = patch_perm.shape[0]
    special = np.broadcast_to(np.arange(NUM_SPECIAL_TOKENS), (batch, NUM_SPECIAL_TOKENS))
    return np.concatenate([special, patch_perm + NUM_SPECIAL_TOKENS], axis=1)


def mixed_forward(
    images: np.ndarray,
    model: ViTModel,
    betas: BetaWeights,
    rng: Optional[np.random.Generator] = None,
    sci_permutations: Optional[np.ndarray] = None,
    block_permutations: Optional[Sequence[np.ndarray]] = None,
    trace: Optional[MixedTrace] = None,
) -> Tensor:
    """
    Goal logits of the convex clean/SCI mixture.

    The first block's SCI branch reads the patch-shuffled input image. Deeper
    blocks shuffle the patch tokens of the incoming mixed stream with a fresh
    permutation. Mixed head outputs propagate through the residual stream.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    cfg = model.config
    batch, num_patches = images.shape[0], cfg.num_patches
    rng = rng if rng is not None else np.random.default_rng(0)
    if sci_permutations is None:
        sci_permutations = random_patch_permutations(rng, batch, num_patches)
    beta1 = betas.beta1_tensor()

    tokens = model.patchify_embed(images)
    sci_tokens = model.patchify_embed(make_sci_batch(images, sci_permutations, cfg.patch_size))
    for block in range(cfg.num_blocks):
        if block > 0:
            if block_permutations is not None:
                perm = block_permutations[block - 1]
            else:
                perm = random_patch_permutations(rng, batch, num_patches)
            sci_tokens = ad.permute_rows(tokens, _token_permutation(perm))
        clean = model.head_outputs(model.pre_norm(tokens, block), block)
        shuffled = model.head_outputs(model.pre_norm(sci_tokens, block), block)
        mixed = []
        block_trace = []
        for head, (a_x, a_sci) in enumerate(zip(clean, shuffled)):
            weight = ad.take(ad.take(beta1, block, axis=0), head, axis=0)
            out = a_x * weight + a_sci * (1.0 - weight)
            mixed.append(out)
            block_trace.append((a_x, a_sci, out))
        if trace is not None:
            trace.heads.append(block_trace)
        tokens = model.finish_block(tokens, mixed, block)
    return model.readout(tokens).goal_logits


def fit_beta(
    model: ViTModel,
    dataset: DomainDataset,
    config: SelectionConfig,
    rng: np.random.Generator,
    betas: Optional[BetaWeights] = None,
) -> BetaWeights:
    """Trains only the per-head beta logits under the goal loss; the model is untouched."""
    cfg = model.config
    betas = betas or BetaWeights(cfg.num_blocks, cfg.heads_per_block)
    state = SgdState(learning_rate=config.beta_lr, momentum=0.9, weight_decay=0.0)
    with model.frozen():
        for epoch in range(config.beta_epochs):
            losses = []
            for idx in dataset.batches(config.batch_size, rng):
                logits = mixed_forward(dataset.images[idx], model, betas, rng=rng)
                loss = ad.cross_entropy(logits, dataset.labels[idx])
                if not np.isfinite(loss.item()):
                    raise TrainingDivergedError(
                        "non-finite loss while fitting head weights",
                        {"epoch": epoch, "batch": len(losses), "beta1_min": float(betas.beta1.min()),
                         "beta1_max": float(betas.beta1.max())},
                    )
                betas.logits.grad = None
                ad.backward(loss)
                ad.sgd_step({"beta_logits": betas.logits}, state)
                losses.append(loss.item())
            logger.info("beta epoch %d: loss %.4f", epoch + 1, float(np.mean(losses)))
    return betas


def compute_cis(betas: BetaWeights) -> np.ndarray:
    return betas.beta2 - betas.beta1


def select_count(lam: float, num_heads: int) -> int:
    """round(lam * num_heads), halves rounded up."""
    return int(np.floor(lam * num_heads + 0.5))


def select_noncausal(scores: np.ndarray, lam: float, tau: float) -> np.ndarray:
    """
    Marks the top round(lam * L * N_h) heads by CIS that also exceed tau.
    Ties go to the lower (block, head) index.
    """
    if not 0.0 < lam < 1.0:
        raise ContractError(f"lambda must lie in (0, 1), got {lam}")
    scores = np.asarray(scores, dtype=np.float64)
    blocks, heads = scores.shape
    k = select_count(lam, blocks * heads)
    ranked = sorted(
        ((b, h) for b in range(blocks) for h in range(heads)),
        key=lambda bh: (-scores[bh], bh[0], bh[1]),
    )
    chosen = [bh for bh in ranked if scores[bh] > tau][:k]
    if not chosen:
        raise ConfigurationError(f"no head has CIS above tau={tau}; max CIS is {scores.max():.4f}")
    mask = np.zeros((blocks, heads), dtype=bool)
    for bh in chosen:
        mask[bh] = True
    return mask


def build_cis_report(betas: BetaWeights, lam: float, tau: float) -> CisReport:
    cis = compute_cis(betas)
    mask = select_noncausal(cis, lam, tau)
    return CisReport(
        cis=cis.tolist(),
        beta1=betas.beta1.tolist(),
        tau=tau,
        lam=lam,
        mask=mask.tolist(),
        num_selected=int(mask.sum()),
    )


def select_heads(
    model: ViTModel, dataset: DomainDataset, config: SelectionConfig, rng: np.random.Generator
) -> CisReport:
    betas = fit_beta(model, dataset, config, rng)
    report = build_cis_report(betas, config.lam, config.tau)
    logger.info("selected %d non-causal heads (lambda=%.2f, tau=%.2f)", report.num_selected, config.lam, config.tau)
    return report
