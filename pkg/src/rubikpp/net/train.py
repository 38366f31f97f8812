"""One-step updates: the adversarial restoration step and the segmentation step."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .. import loss as L
from ..errors import RubikError, ShapeError
from .models import Discriminator, Generator
from .optim import AdamState, adam_step

RECON = {"l1": (L.l1_loss, L.l1_grad), "l2": (L.l2_loss, L.l2_grad)}


def _recon(name):
    try:
        return RECON[name]
    except KeyError:
        raise RubikError(f"unknown reconstruction loss {name!r}") from None


def discriminator_objective(x, y, fake, D: Discriminator):
    """Discriminator loss ``-adv_d`` (binary cross-entropy) and its gradients."""
    d_real, real_cache = D.forward(x, y)
    d_fake, fake_cache = D.forward(x, fake)
    adv_d = L.adv_loss_d(d_real, d_fake)
    g_real, g_fake = L.adv_loss_d_grads(d_real, d_fake)
    grads_r, _, _ = D.backward(real_cache, d_real, -g_real)
    grads_f, _, _ = D.backward(fake_cache, d_fake, -g_fake)
    grads = {k: grads_r[k] + grads_f[k] for k in grads_r}
    return -adv_d, grads


def generator_objective(x, y, G: Generator, D: Optional[Discriminator], weights: L.LossWeights,
                        mode: str = "nonsaturating", recon: str = "l1"):
    """Joint generator objective ``adversarial * adv_g + lam * recon`` and its gradients.

    Returns ``(terms, grads)`` where ``terms`` holds l1, l2, adv_g and joint.
    """
    recon_loss, recon_grad = _recon(recon)
    fake, cache = G.forward(x)
    if fake.shape != y.shape:
        raise ShapeError(f"shape error: generator output {fake.shape} vs target {y.shape}")
    gout = weights.lam * recon_grad(y, fake)
    adv_g = 0.0
    if D is not None and weights.adversarial > 0:
        d_fake, d_cache = D.forward(x, fake)
        adv_g = L.adv_loss_g(d_fake, mode)
        _, _, g_cand = D.backward(d_cache, d_fake, weights.adversarial * L.adv_loss_g_grad(d_fake, mode))
        gout = gout + g_cand
    grads, _ = G.backward(cache, gout)
    terms = {
        "l1": L.l1_loss(y, fake),
        "l2": L.l2_loss(y, fake),
        "adv_g": adv_g,
        "joint": weights.adversarial * adv_g + weights.lam * recon_loss(y, fake),
    }
    return terms, grads


def gan_train_step(x, y, G: Generator, D: Optional[Discriminator], g_opt: AdamState,
                   d_opt: Optional[AdamState], weights: L.LossWeights = L.LossWeights(),
                   mode: str = "nonsaturating", recon: str = "l1") -> L.LossReport:
    """One discriminator update followed by one generator update.

    With ``D=None`` or ``weights.adversarial == 0`` only the generator is
    trained, on the reconstruction term alone.
    """
    if x.shape != y.shape:
        raise ShapeError(f"shape error: x {x.shape} vs y {y.shape}")
    adv_d = 0.0
    adversarial = D is not None and weights.adversarial > 0
    if adversarial:
        fake = G(x)
        d_loss, d_grads = discriminator_objective(x, y, fake, D)
        adv_d = -d_loss
        adam_step(D.params, d_grads, d_opt)
    terms, g_grads = generator_objective(x, y, G, D if adversarial else None, weights, mode, recon)
    adam_step(G.params, g_grads, g_opt)
    return L.LossReport(l1=terms["l1"], l2=terms["l2"], adv_d=adv_d, adv_g=terms["adv_g"], joint=terms["joint"])


def segmentation_step(x, labels, model: Generator, opt: AdamState, class_weights=None) -> float:
    """One cross-entropy update of a head-swapped generator; returns the pre-update loss."""
    logits, cache = model.forward(x)
    value = L.cross_entropy(logits, labels, class_weights)
    grads, _ = model.backward(cache, L.cross_entropy_grad(logits, labels, class_weights))
    adam_step(model.params, grads, opt)
    return value


def predict_labels(model: Generator, x) -> np.ndarray:
    return np.argmax(model(x), axis=1)
