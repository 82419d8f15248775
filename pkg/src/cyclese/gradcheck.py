"""Finite-difference checks for every network and loss on tiny instances.

Central differences in double precision carry a noise floor of roughly
``|loss| * 2**-52 / epsilon``. With ``epsilon = 1e-5`` and the ``1e-8``
denominator floor of the relative error, a loss of order 1 already puts
near-zero gradient entries above ``1e-4``. The instances below therefore
keep every probed loss well under 0.1:

* mapping losses use full-amplitude inputs and targets within 1e-3 of the
  current outputs, so the gates sit in their nonlinear range;
* cycle, identity and total losses use low-amplitude features;
* discrimination losses use discriminators rescaled so that real frames
  score a logit of at least +9 and generated frames at most -9.

Two further hazards are handled explicitly. A ReLU pre-activation within
about ``epsilon`` of zero makes the central difference straddle the kink,
so hidden biases are nudged until every pre-activation of the probed frames
is clear of zero. And the truncation error of a central difference grows
with the cube of the logit's slope; the rescale is spread evenly over all
layers and the ACSE frames are made large enough (0.01) that the slope with
respect to the generated frames stays moderate.
"""

from __future__ import annotations

import time

import numpy as np

from . import losses as L
from .features import N_AUGMENTED, N_STATIC
from .nn import Discriminator, DiscriminatorSpec, MappingNetwork, MappingSpec, grad_check

TOLERANCE = 1e-4
EPSILON = 1e-5

TINY_MAPPING = dict(hidden=8, proj=4, layers=2)
TINY_DISC = dict(hidden=16, layers=2)


def tiny_networks(seed=0):
    F = MappingNetwork(MappingSpec(N_AUGMENTED, N_STATIC, **TINY_MAPPING), seed=seed)
    G = MappingNetwork(MappingSpec(N_STATIC, N_AUGMENTED, **TINY_MAPPING), seed=seed + 1)
    D_U = Discriminator(DiscriminatorSpec(N_AUGMENTED, **TINY_DISC), seed=seed + 2)
    D_V = Discriminator(DiscriminatorSpec(N_STATIC, **TINY_DISC), seed=seed + 3)
    return F, G, D_U, D_V


def _merged(**nets):
    return {f"{role}/{k}": v for role, net in nets.items() for k, v in net.params.items()}


def _flat(grads, roles):
    return {f"{role}/{k}": v for role in roles for k, v in grads[role].items()}


def _homogeneous_logit(D, frames):
    """Logit minus the output bias; scales linearly with ``D.params['out.w']``."""
    p = D.params
    h = np.asarray(frames, dtype=np.float64)
    for l in range(D.spec.layers):
        h = np.maximum(h @ p[f"h{l}.w"].T + p[f"h{l}.b"], 0.0)
    return (h @ p["out.w"].T)[:, 0]


def clear_kinks(D, frames, rel_gap=0.05):
    """Shift each hidden bias by the least amount that keeps every
    pre-activation of ``frames`` at least ``rel_gap`` (relative to the unit's
    largest magnitude) away from the ReLU kink."""
    p = D.params
    h = np.asarray(frames, dtype=np.float64)
    for l in range(D.spec.layers):
        z = h @ p[f"h{l}.w"].T + p[f"h{l}.b"]
        for j in range(z.shape[1]):
            col = np.sort(z[:, j])
            gap = rel_gap * max(np.abs(col).max(), 1e-12)
            # zero crossing below, above, or between two neighbouring values
            cands = [gap - col[0], -gap - col[-1]]
            cands += [-(a + b) / 2 for a, b in zip(col[:-1], col[1:]) if b - a >= 2 * gap]
            cands.append(0.0)
            ok = [c for c in cands if np.abs(col + c).min() >= 0.999 * gap]
            p[f"h{l}.b"][j] += min(ok, key=abs)
        h = np.maximum(h @ p[f"h{l}.w"].T + p[f"h{l}.b"], 0.0)


def make_confident(D, candidates, fake, n_real, margin=9.0, ceiling=14.0):
    """Rescale ``D``'s output layer so chosen real frames score in
    ``[margin, ceiling]`` and every fake frame scores at most ``-margin``;
    returns the real frames.

    Real frames are the ``n_real`` candidates, above every fake frame, whose
    logits are spread the least.
    """
    scores = _homogeneous_logit(D, candidates)
    hi_fake = _homogeneous_logit(D, fake).max()
    order = np.argsort(scores)
    s = scores[order] - hi_fake
    best = None
    for start in range(len(s) - n_real + 1):
        lo, hi = s[start], s[start + n_real - 1]
        if lo > 0 and (best is None or hi / lo < best[0]):
            best = (hi / lo, start)
    if best is None or -margin + 2.0 * margin * best[0] > ceiling:
        raise ValueError("candidate pool cannot be separated from the fake frames")
    real = candidates[order[best[1]:best[1] + n_real]]
    k = 2.0 * margin / s[best[1]]
    # spread the gain over all layers; with biases scaled along, the logit
    # minus the output bias is multiplied by exactly k, while no single
    # layer becomes steep enough to spoil central differences
    n = D.spec.layers + 1
    g = k ** (1.0 / n)
    for l in range(D.spec.layers):
        D.params[f"h{l}.w"] *= g
        D.params[f"h{l}.b"] *= g ** (l + 1)
    D.params["out.w"] *= g
    D.params["out.b"][:] = -margin - k * hi_fake
    return real


class Suite:
    """One named check: a parameter dict, a (loss, grads) probe and a loss-only function."""

    def __init__(self, name, params, probe, loss_fn):
        self.name = name
        self.params = params
        self.probe = probe
        self.loss_fn = loss_fn

    def run(self, epsilon=EPSILON):
        return grad_check(self.params, self.probe, epsilon, loss_fn=self.loss_fn)


def build_suites(seed=0, T=6, amplitude=0.005, target_offset=1e-3):
    rng = np.random.default_rng(seed)
    F, G, D_U, D_V = tiny_networks(seed)
    suites = []

    # mapping losses at full amplitude
    X = rng.normal(size=(T, N_AUGMENTED))
    Y_near = F(X) + target_offset * rng.normal(size=(T, N_STATIC))
    suites.append(Suite(
        "L_NC", _merged(F=F),
        lambda: (lambda v, g: (v, _flat(g, ["F"])))(*L.loss_nc(F, X, Y_near)),
        lambda: L.mse_seq(F(X), Y_near)[0]))
    Y = rng.normal(size=(T, N_STATIC))
    X_near = G(Y) + target_offset * rng.normal(size=(T, N_AUGMENTED))
    suites.append(Suite(
        "L_CN", _merged(G=G),
        lambda: (lambda v, g: (v, _flat(g, ["G"])))(*L.loss_cn(G, Y, X_near)),
        lambda: L.mse_seq(G(Y), X_near)[0]))

    # cycles and identities at low amplitude
    Xs = amplitude * rng.normal(size=(T, N_AUGMENTED))
    Ys = amplitude * rng.normal(size=(T, N_STATIC))
    suites.append(Suite(
        "L_NN", _merged(F=F, G=G),
        lambda: (lambda v, g: (v, _flat(g, ["F", "G"])))(*L.loss_nn(F, G, Xs)),
        lambda: L.mse_seq(G(F(Xs)), Xs)[0]))
    suites.append(Suite(
        "L_CC", _merged(F=F, G=G),
        lambda: (lambda v, g: (v, _flat(g, ["F", "G"])))(*L.loss_cc(G, F, Ys)),
        lambda: L.mse_seq(F(G(Ys)), Ys)[0]))
    suites.append(Suite(
        "L_IN", _merged(G=G),
        lambda: (lambda v, g: (v, _flat(g, ["G"])))(*L.identity_loss_noisy(G, Xs)),
        lambda: L.identity_loss_noisy(G, Xs)[0]))
    suites.append(Suite(
        "L_IC", _merged(F=F),
        lambda: (lambda v, g: (v, _flat(g, ["F"])))(*L.identity_loss_clean(F, Ys)),
        lambda: L.identity_loss_clean(F, Ys)[0]))
    suites.append(Suite(
        "CSE total", _merged(F=F, G=G),
        lambda: (lambda b: (b.total, _flat(b.grads, ["F", "G"])))(L.cse_total(F, G, Xs, Ys)),
        lambda: L.cse_total(F, G, Xs, Ys).total))

    # discrimination losses with wide-margin discriminators at full amplitude
    T_v = T + 2
    suites += _discrimination_suites(F, G, D_U, D_V, rng, T, T_v, 1.0)

    suites += _acse_suites(seed + 10, np.random.default_rng(seed), T, T_v, 2 * amplitude)
    return suites


def _acse_suites(seed, rng, T_u, T_v, amplitude, clean_amplitude=None, margin=9.0):
    """ACSE total on small frames."""
    F, G, D_U, D_V = tiny_networks(seed)
    U, V = _separated_sets(F, G, D_U, D_V, rng, T_u, T_v, amplitude,
                           clean_amplitude=clean_amplitude, margin=margin)
    w = L.AcseWeights()

    def generator_objective(b):
        # the mapping networks descend the total with the discrimination
        # terms' signs flipped; the discriminators descend the total itself
        return b.total + 2.0 * w.alpha2 * b["dn"] + 2.0 * w.alpha3 * b["dc"]

    return [
        Suite("ACSE total (D_U, D_V)", _merged(D_U=D_U, D_V=D_V),
              lambda: (lambda b: (b.total, _flat(b.grads, ["D_U", "D_V"])))(
                  L.acse_total(F, G, D_U, D_V, U, V, w)),
              lambda: L.acse_total(F, G, D_U, D_V, U, V, w).total),
        Suite("ACSE total (F, G)", _merged(F=F, G=G),
              lambda: (lambda b: (generator_objective(b), _flat(b.grads, ["F", "G"])))(
                  L.acse_total(F, G, D_U, D_V, U, V, w)),
              lambda: generator_objective(L.acse_total(F, G, D_U, D_V, U, V, w))),
    ]


def _separated_sets(F, G, D_U, D_V, rng, T_u, T_v, amplitude, pool=200,
                    clean_amplitude=None, margin=9.0):
    """Pick real frames U, V and rescale both discriminators around them.

    Candidate ranking is unaffected by rescaling the output layer, so the
    second pass over the noisy side reproduces the first selection of U and
    only refits D_U against the final G(V).
    """
    a_v = amplitude if clean_amplitude is None else clean_amplitude
    V = a_v * rng.normal(size=(T_v, N_STATIC))
    U_pool = amplitude * rng.normal(size=(pool, N_AUGMENTED))
    V_pool = a_v * rng.normal(size=(pool, N_STATIC))
    base = {k: v.copy() for k, v in D_U.params.items()}
    clear_kinks(D_U, np.vstack([U_pool, G(V)]))
    U = make_confident(D_U, U_pool, G(V), T_u, margin)
    clear_kinks(D_V, np.vstack([V_pool, F(U)]))
    V = make_confident(D_V, V_pool, F(U), T_v, margin)
    # G(V) moved with V: refit D_U from its unscaled weights
    D_U.params.update({k: v.copy() for k, v in base.items()})
    clear_kinks(D_U, np.vstack([U_pool, G(V)]))
    U = make_confident(D_U, U_pool, G(V), T_u, margin)
    return U, V


def _discrimination_suites(F, G, D_U, D_V, rng, T_u, T_v, amplitude):
    U, V = _separated_sets(F, G, D_U, D_V, rng, T_u, T_v, amplitude)

    def dn_probe():
        U_hat, cache = G.forward(V)
        value, g = L.disc_loss_noisy(D_U, U, U_hat)
        gG, _ = G.backward(cache, g["U_hat"])
        return value, _flat({"D_U": g["D_U"], "G": gG}, ["D_U", "G"])

    def dc_probe():
        V_hat, cache = F.forward(U)
        value, g = L.disc_loss_clean(D_V, V, V_hat)
        gF, _ = F.backward(cache, g["V_hat"])
        return value, _flat({"D_V": g["D_V"], "F": gF}, ["D_V", "F"])

    return [
        Suite("L_DN", _merged(D_U=D_U, G=G), dn_probe, lambda: L.disc_loss_noisy(D_U, U, G(V))[0]),
        Suite("L_DC", _merged(D_V=D_V, F=F), dc_probe, lambda: L.disc_loss_clean(D_V, V, F(U))[0]),
    ]


def run_all(seed=0, epsilon=EPSILON, report=None):
    """Run every suite; returns ``{name: (max_rel_error, seconds)}``."""
    results = {}
    for suite in build_suites(seed):
        t0 = time.perf_counter()
        err = suite.run(epsilon)
        results[suite.name] = (err, time.perf_counter() - t0)
        if report is not None:
            report(suite.name, err, results[suite.name][1])
    return results
