"""Training objectives: label-smoothed cross-entropy for the end-to-end
translator, the least-squares GAN pair, and the two probe losses.

Each loss is a pure function of tensors so gradient checks and brute-force
oracles can exercise it directly.  ``lsr_ce`` exposes both readings of the
smoothing mass (see LossConfig.smoothing_mass_rule): the off-token weight is
kappa/(E-1) under ``paper-literal`` and (1-kappa)/(E-1) under ``standard``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from semlink import autodiff as ad
from semlink.autodiff import Tensor
from semlink.tokens import EOS_ID, PAD_ID

PROB_FLOOR = 1e-12


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kappa: float = 0.95
    xi: float = 10.0
    smoothing_mass_rule: str = "paper-literal"   # paper-literal | standard

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise LossError("kappa must lie in [0, 1]")
        if self.xi <= 0.0:
            raise LossError("xi must be positive")
        if self.smoothing_mass_rule not in ("paper-literal", "standard"):
            raise LossError(f"unknown smoothing rule '{self.smoothing_mass_rule}'")


def included_positions(targets: np.ndarray) -> int:
    """Count of scored positions: up to and including the first EOS, and
    never at or past the first PAD."""
    targets = np.asarray(targets)
    n = len(targets)
    pads = np.flatnonzero(targets == PAD_ID)
    if pads.size:
        n = min(n, int(pads[0]))
    eoss = np.flatnonzero(targets[:n] == EOS_ID)
    if eoss.size:
        n = min(n, int(eoss[0]) + 1)
    return n


def _clamped_log(pred: Tensor, report: dict | None) -> Tensor:
    low = pred.data < PROB_FLOOR
    if low.any():
        if report is not None:
            report["clamped"] = report.get("clamped", 0) + int(low.sum())
        pred = ad.masked_fill(pred, low, PROB_FLOOR)
    return ad.log(pred)


def lsr_ce(pred: Tensor, targets, cfg: LossConfig, report: dict | None = None) -> Tensor:
    """Label-smoothing-regularized cross-entropy, mean over scored positions.

    pred: (L, E) rows of token probabilities; targets: length-L token ids.
    Per position the true token carries weight kappa and every other token
    carries mass/(E-1).
    """
    targets = np.asarray(targets, dtype=np.int64)
    if pred.data.ndim != 2 or pred.shape[0] != len(targets):
        raise LossError(f"pred {pred.shape} does not match {len(targets)} target tokens")
    n_pos, n_vocab = pred.shape
    if targets.min() < 0 or targets.max() >= n_vocab:
        raise LossError("target token id out of vocabulary range")
    n_incl = included_positions(targets)
    if n_incl == 0:
        return Tensor(0.0)
    mass = cfg.kappa if cfg.smoothing_mass_rule == "paper-literal" else 1.0 - cfg.kappa
    weights = np.zeros((n_pos, n_vocab))
    weights[:n_incl, :] = mass / (n_vocab - 1)
    weights[np.arange(n_incl), targets[:n_incl]] = cfg.kappa
    logp = _clamped_log(pred, report)
    total = ad.sum_(ad.mul(logp, Tensor(weights)))
    return ad.mul(Tensor(-1.0 / n_incl), total)


def plain_ce(pred: Tensor, targets, report: dict | None = None) -> Tensor:
    """Mean cross-entropy over scored positions (the kappa=1 standard case)."""
    return lsr_ce(pred, targets, LossConfig(kappa=1.0, smoothing_mass_rule="standard"),
                  report=report)


def disc_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Least-squares discriminator objective: 0.5(D_real-1)^2 + 0.5 D_fake^2."""
    half = Tensor(0.5)
    real_term = ad.mul(half, ad.square(ad.sub(d_real, Tensor(1.0))))
    fake_term = ad.mul(half, ad.square(d_fake))
    return ad.add(real_term, fake_term)


def gen_loss(f_real: Tensor, f_fake: Tensor, d_fake: Tensor, cfg: LossConfig) -> Tensor:
    """Generator objective: 0.5 xi mean((F - F~)^2) + 0.5 (D_fake - 1)^2."""
    if f_real.shape != f_fake.shape:
        raise LossError(f"feature shapes {f_real.shape} and {f_fake.shape} do not match")
    mse = ad.mean(ad.square(ad.sub(f_real, f_fake)))
    adv = ad.square(ad.sub(d_fake, Tensor(1.0)))
    return ad.add(ad.mul(Tensor(0.5 * cfg.xi), mse), ad.mul(Tensor(0.5), adv))


def probe_net_loss(i_clean: Tensor, i_comp: Tensor, c: Tensor) -> Tensor:
    """Probe regression: sum_l (i_l - c_l * i~_l)^2 over per-position scalars."""
    if not (i_clean.shape == i_comp.shape == c.shape) or i_clean.data.ndim != 1:
        raise LossError(f"probe loss lengths {i_clean.shape}/{i_comp.shape}/{c.shape} do not match")
    return ad.sum_(ad.square(ad.sub(i_clean, ad.mul(c, i_comp))))


def probe_comp_loss(pred: Tensor, targets, probe: np.ndarray) -> Tensor:
    """Cross-entropy restricted to probed positions: -sum_{l: C_l=1} log p(t_l)."""
    targets = np.asarray(targets, dtype=np.int64)
    probe = np.asarray(probe)
    if len(probe) != len(targets) or pred.shape[0] != len(targets):
        raise LossError(f"probe length {len(probe)} does not match {len(targets)} positions")
    sel = probe != 0
    if not sel.any():
        return Tensor(0.0)
    n_pos, n_vocab = pred.shape
    weights = np.zeros((n_pos, n_vocab))
    weights[sel, targets[sel]] = 1.0
    logp = _clamped_log(pred, None)
    return ad.mul(Tensor(-1.0), ad.sum_(ad.mul(logp, Tensor(weights))))
