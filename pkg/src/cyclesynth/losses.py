"""Adversarial, cycle-consistency and paired-baseline objectives.

Discriminators are trained with least-squares targets on their raw patch
score maps: real patches toward 1, synthesized patches toward 0. The
generators minimize the flipped-target form (1 - score)^2, which shares
the discriminator loss's fixed point but gives stronger gradients than
maximizing the discriminator objective directly.

All score-map and image reductions are means, never sums, so the cycle
weight keeps its meaning across image and patch-map resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import engine


@dataclass
class LossBreakdown:
    """Per-step scalar loss components for one unpaired training step."""
    d_ct: float
    d_mr: float
    g_adv_ct: float
    g_adv_mr: float
    cycle: float
    lam: float
    total_g: float
    total_d: float


def _mean_sq_toward(score, target):
    if score.data.size == 0:
        raise engine.EmptyTensorError("empty score map")
    return engine.tmean(engine.square(target - score))


def loss_dis(score_real, score_fake):
    """Least-squares discriminator loss: mean (1-real)^2 + mean fake^2.

    The two maps may have different shapes; each is averaged on its own.
    """
    return engine.add(_mean_sq_toward(score_real, 1.0),
                      _mean_sq_toward(score_fake, 0.0))


# both domains use the same form; kept as named entry points for the trainer
loss_dis_ct = loss_dis
loss_dis_mr = loss_dis


def loss_gen_adv(score_fake):
    """Generator-side adversarial term: mean (1 - score_fake)^2.

    Zero exactly when the discriminator scores every patch of the fake as 1.
    """
    return _mean_sq_toward(score_fake, 1.0)


def loss_cycle(i_mr, rec_mr, i_ct, rec_ct):
    """Mean absolute reconstruction error summed over both cycle directions."""
    if i_mr.data.shape != rec_mr.data.shape:
        raise engine.ShapeError(
            f"cycle loss: reconstruction {rec_mr.data.shape} != original {i_mr.data.shape}")
    if i_ct.data.shape != rec_ct.data.shape:
        raise engine.ShapeError(
            f"cycle loss: reconstruction {rec_ct.data.shape} != original {i_ct.data.shape}")
    return engine.add(engine.tmean(engine.absolute(rec_mr - i_mr)),
                      engine.tmean(engine.absolute(rec_ct - i_ct)))


def loss_paired(fake_ct, real_ct, score_fake, mu=100.0):
    """Paired-baseline generator objective: adversarial term plus mu * voxel L1."""
    if fake_ct.data.shape != real_ct.data.shape:
        raise engine.ShapeError(
            f"paired loss: fake {fake_ct.data.shape} != real {real_ct.data.shape}")
    l1 = engine.tmean(engine.absolute(fake_ct - real_ct))
    return engine.add(loss_gen_adv(score_fake), float(mu) * l1)


def total_generator_loss(g_adv_ct, g_adv_mr, cycle, lam):
    """Joint objective for both generators: adversarial terms plus lam * cycle."""
    return engine.add(engine.add(g_adv_ct, g_adv_mr), float(lam) * cycle)
