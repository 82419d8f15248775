"""Cycle-consistency, discrimination and identity-mapping losses.

Every loss returns its scalar value together with gradients for the
networks it touches, so trainers never differentiate anything themselves.

Squared errors sum over feature dimensions and average over frames, which
keeps the 29-dim (clean) and 87-dim (noisy) sides on the same footing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .errors import ConfigError, DataError, DimensionError, NumericError
from .features import N_STATIC, append_deltas
from .nn import grl

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class CseWeights:
    """Weights of the noisy-reconstruction, clean-to-noisy and clean-reconstruction terms."""

    lambda1: float = 0.6
    lambda2: float = 0.4
    lambda3: float = 1.4

    def __post_init__(self):
        for k, v in vars(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{k} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class AcseWeights:
    alpha1: float = 1.0
    alpha2: float = 8.0
    alpha3: float = 8.0
    alpha4: float = 0.5
    alpha5: float = 0.5

    def __post_init__(self):
        for k, v in vars(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{k} must be finite and non-negative, got {v}")


@dataclass
class LossBundle:
    """Named scalar losses plus accumulated gradients per network.

    ``grads`` maps a network role ("F", "G", "D_U", "D_V") to a dict of
    parameter gradients shaped like that network's parameters.
    """

    losses: dict[str, float] = field(default_factory=dict)
    grads: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    terms: dict[tuple[str, str], dict[str, np.ndarray]] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.losses[name]

    @property
    def total(self) -> float:
        return self.losses["total"]

    def add_grads(self, role, grads, scale=1.0):
        acc = self.grads.setdefault(role, {k: np.zeros_like(v) for k, v in grads.items()})
        for k, v in grads.items():
            acc[k] += scale * v

    def check_finite(self):
        for name, value in self.losses.items():
            if not np.isfinite(value):
                raise NumericError(name)
        for role, grads in self.grads.items():
            for k, v in grads.items():
                if not np.all(np.isfinite(v)):
                    raise NumericError(f"{role}.{k}")
        return self


def _arr(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def mse_seq(a, b):
    """Frame-averaged squared error and its gradient with respect to ``a``."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    T = a.shape[0]
    return float(np.sum(diff * diff) / T), (2.0 / T) * diff


# --------------------------------------------------------------------------
# parallel-data (CSE) losses
# --------------------------------------------------------------------------

def loss_nc(F, X, Y):
    """Noisy-to-clean mapping loss: MSE between F(X) and the clean targets."""
    out, cache = F.forward(X)
    value, d = mse_seq(out, Y)
    gF, _ = F.backward(cache, d)
    return value, {"F": gF}


def loss_cn(G, Y, X):
    out, cache = G.forward(Y)
    value, d = mse_seq(out, X)
    gG, _ = G.backward(cache, d)
    return value, {"G": gG}


def loss_nn(F, G, X):
    """Forward cycle: X -> F -> G should reproduce X."""
    enhanced, cF = F.forward(X)
    recon, cG = G.forward(enhanced)
    value, d = mse_seq(recon, X)
    gG, d_enh = G.backward(cG, d)
    gF, _ = F.backward(cF, d_enh)
    return value, {"F": gF, "G": gG}


def loss_cc(G, F, Y):
    """Backward cycle: Y -> G -> F should reproduce Y."""
    noised, cG = G.forward(Y)
    recon, cF = F.forward(noised)
    value, d = mse_seq(recon, Y)
    gF, d_noised = F.backward(cF, d)
    gG, _ = G.backward(cG, d_noised)
    return value, {"F": gF, "G": gG}


def cse_total(F, G, X, Y, w: CseWeights = CseWeights()) -> LossBundle:
    """All four parallel-data losses and ``nc + l1*nn + l2*cn + l3*cc``.

    The shared forward passes F(X) and G(Y) are computed once and reused by
    the mapping and cycle terms.
    """
    X, Y = _arr(X), _arr(Y)
    if X.shape[0] != Y.shape[0]:
        raise DataError(f"parallel pair has {X.shape[0]} noisy vs {Y.shape[0]} clean frames")
    bundle = LossBundle()

    enhanced, cF = F.forward(X)
    nc, d_enh = mse_seq(enhanced, Y)
    d_enh = d_enh.copy()
    recon_x, cGr = G.forward(enhanced)
    nn_, d_rx = mse_seq(recon_x, X)
    gG_nn, d_enh_nn = G.backward(cGr, w.lambda1 * d_rx)
    d_enh += d_enh_nn
    gF_x, _ = F.backward(cF, d_enh)

    noised, cG = G.forward(Y)
    cn, d_noised = mse_seq(noised, X)
    d_noised = w.lambda2 * d_noised
    recon_y, cFr = F.forward(noised)
    cc, d_ry = mse_seq(recon_y, Y)
    gF_cc, d_noised_cc = F.backward(cFr, w.lambda3 * d_ry)
    d_noised += d_noised_cc
    gG_y, _ = G.backward(cG, d_noised)

    bundle.losses = {"nc": nc, "nn": nn_, "cn": cn, "cc": cc,
                     "total": nc + w.lambda1 * nn_ + w.lambda2 * cn + w.lambda3 * cc}
    bundle.add_grads("F", gF_x)
    bundle.add_grads("F", gF_cc)
    bundle.add_grads("G", gG_nn)
    bundle.add_grads("G", gG_y)
    return bundle.check_finite()


def forward_cycle_total(F, G, X, Y, w: CseWeights = CseWeights()) -> LossBundle:
    """``nc + l2*cn + l1*nn``: the objective with the forward cycle only."""
    X, Y = _arr(X), _arr(Y)
    if X.shape[0] != Y.shape[0]:
        raise DataError(f"parallel pair has {X.shape[0]} noisy vs {Y.shape[0]} clean frames")
    bundle = LossBundle()
    enhanced, cF = F.forward(X)
    nc, d_enh = mse_seq(enhanced, Y)
    recon_x, cGr = G.forward(enhanced)
    nn_, d_rx = mse_seq(recon_x, X)
    gG_nn, d_enh_nn = G.backward(cGr, w.lambda1 * d_rx)
    gF, _ = F.backward(cF, d_enh + d_enh_nn)
    cn, gcn = loss_cn(G, Y, X)
    bundle.losses = {"nc": nc, "nn": nn_, "cn": cn,
                     "total": nc + w.lambda1 * nn_ + w.lambda2 * cn}
    bundle.add_grads("F", gF)
    bundle.add_grads("G", gG_nn)
    bundle.add_grads("G", gcn["G"], w.lambda2)
    return bundle.check_finite()


# --------------------------------------------------------------------------
# discrimination losses
# --------------------------------------------------------------------------

# the probability clamp [c, 1 - c] expressed on the logit
LOGIT_CLAMP = float(np.log((1.0 - PROB_CLAMP) / PROB_CLAMP))


def _log_posterior(logit, sign):
    """``log sigmoid(sign * z)`` for the clamped logit and its derivative in ``z``.

    Working on logits keeps full relative precision for posteriors near 0
    or 1; clamping the logit is the same as clamping the posterior.
    """
    z = np.clip(logit, -LOGIT_CLAMP, LOGIT_CLAMP)
    inside = np.abs(logit) < LOGIT_CLAMP
    return log_expit(sign * z), np.where(inside, sign * expit(-sign * z), 0.0)


def discrimination(D, real, fake):
    """Mean log D(real) + mean log(1 - D(fake)) with gradients.

    Posteriors are clamped to ``[1e-7, 1 - 1e-7]`` before the logs. Returns
    ``(value, grads_D, d_fake)`` where ``d_fake`` is the gradient of the
    value with respect to the fake frames (for pushing into a generator).
    """
    real, fake = _arr(real), _arr(fake)
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise DataError("discrimination loss needs frames on both sides")
    _, c_real = D.forward(real)
    _, c_fake = D.forward(fake)
    lr, dr = _log_posterior(c_real.top, 1.0)
    lf, df = _log_posterior(c_fake.top, -1.0)
    value = float(lr.mean() + lf.mean())
    g_real, _ = D.backward_logit(c_real, dr / real.shape[0])
    g_fake, d_fake = D.backward_logit(c_fake, df / fake.shape[0])
    grads = {k: g_real[k] + g_fake[k] for k in g_real}
    return value, grads, d_fake


def disc_loss_noisy(D_U, U, U_hat):
    """Noisy-side discrimination log-likelihood (non-positive).

    ``U_hat`` holds G's noised frames; the gradient returned under ``"U_hat"``
    is with respect to those frames.
    """
    value, gD, d_fake = discrimination(D_U, U, U_hat)
    return value, {"D_U": gD, "U_hat": d_fake}


def disc_loss_clean(D_V, V, V_hat):
    value, gD, d_fake = discrimination(D_V, V, V_hat)
    return value, {"D_V": gD, "V_hat": d_fake}


# --------------------------------------------------------------------------
# identity-mapping losses
# --------------------------------------------------------------------------

def static_slice(U):
    """The 29 static columns of 87-dim noisy features, as G's input."""
    return _arr(U)[:, :N_STATIC]


def delta_augment(V):
    """Append deltas to 29-dim clean features so F can take them."""
    return append_deltas(_arr(V)).data


def identity_loss_noisy(G, U, G_input=None):
    """``mean ||u - G(static(u))||^2``; ``G_input`` overrides the adapter output."""
    U = _arr(U)
    x = static_slice(U) if G_input is None else _arr(G_input)
    out, cache = G.forward(x)
    value, d = mse_seq(out, U)
    gG, _ = G.backward(cache, d)
    return value, {"G": gG}


def identity_loss_clean(F, V, F_input=None):
    V = _arr(V)
    x = delta_augment(V) if F_input is None else _arr(F_input)
    out, cache = F.forward(x)
    value, d = mse_seq(out, V)
    gF, _ = F.backward(cache, d)
    return value, {"F": gF}


# --------------------------------------------------------------------------
# unparalleled-data (ACSE) total
# --------------------------------------------------------------------------

def acse_total(F, G, D_U, D_V, U, V, w: AcseWeights = AcseWeights(), *,
               U_static=None, V_augmented=None, reverse_gradients=True,
               track_terms=False) -> LossBundle:
    """``nn + a1*cc - a2*dn - a3*dc + a4*in + a5*ic`` with adversarial gradients.

    Discriminator gradients are those of the total, so descending them
    raises the discrimination log-likelihoods. The mapping networks receive
    the discriminator input gradients through a reversal layer of strength
    ``a2`` (into G) or ``a3`` (into F), which makes them work against the
    discriminators while still descending. ``reverse_gradients=False``
    instead passes the gradient of the discriminator's own loss (the
    negated log-likelihood) unreversed and unweighted; it exists for
    checking the reversal.

    ``U_static`` / ``V_augmented`` are the identity-loss inputs; they default
    to the plain static slice and delta augmentation. With ``track_terms``
    the adversarial contributions to F and G are also backpropagated on
    their own and stored in ``bundle.terms[("F", "dc")]`` and
    ``bundle.terms[("G", "dn")]``.
    """
    U, V = _arr(U), _arr(V)
    if U.shape[0] == 0 or V.shape[0] == 0:
        raise DataError("ACSE step needs both a noisy and a clean utterance")

    def reverse(grad, strength):
        return grl(grad, strength) if reverse_gradients else grad

    bundle = LossBundle()

    # forward cycle on the noisy utterance
    V_hat, cF_u = F.forward(U)
    U_rec, cG_r = G.forward(V_hat)
    l_nn, d_urec = mse_seq(U_rec, U)
    gG_nn, dV_hat = G.backward(cG_r, d_urec)
    dV_hat = dV_hat.copy()

    # backward cycle on the clean utterance
    U_hat, cG_v = G.forward(V)
    V_rec, cF_r = F.forward(U_hat)
    l_cc, d_vrec = mse_seq(V_rec, V)
    gF_cc, dU_hat = F.backward(cF_r, w.alpha1 * d_vrec)
    dU_hat = dU_hat.copy()

    # discriminators; their own loss is the negated log-likelihood
    l_dn, gD_U, d_uhat_dn = discrimination(D_U, U, U_hat)
    l_dc, gD_V, d_vhat_dc = discrimination(D_V, V, V_hat)
    adv_u = reverse(-d_uhat_dn, w.alpha2)
    adv_v = reverse(-d_vhat_dc, w.alpha3)
    if track_terms:
        bundle.terms[("G", "dn")] = G.backward(cG_v, adv_u)[0]
        bundle.terms[("F", "dc")] = F.backward(cF_u, adv_v)[0]
    dU_hat += adv_u
    dV_hat += adv_v

    gF_u, _ = F.backward(cF_u, dV_hat)
    gG_v, _ = G.backward(cG_v, dU_hat)

    l_in, gin = identity_loss_noisy(G, U, U_static)
    l_ic, gic = identity_loss_clean(F, V, V_augmented)

    bundle.losses = {
        "nn": l_nn, "cc": l_cc, "dn": l_dn, "dc": l_dc, "in": l_in, "ic": l_ic,
        "total": (l_nn + w.alpha1 * l_cc - w.alpha2 * l_dn - w.alpha3 * l_dc
                  + w.alpha4 * l_in + w.alpha5 * l_ic),
    }
    bundle.add_grads("F", gF_u)
    bundle.add_grads("F", gF_cc)
    bundle.add_grads("F", gic["F"], w.alpha5)
    bundle.add_grads("G", gG_nn)
    bundle.add_grads("G", gG_v)
    bundle.add_grads("G", gin["G"], w.alpha4)
    bundle.add_grads("D_U", gD_U, -w.alpha2)
    bundle.add_grads("D_V", gD_V, -w.alpha3)
    return bundle.check_finite()
