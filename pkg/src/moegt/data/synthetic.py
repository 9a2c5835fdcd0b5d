"""Toy signal/background event generator with collider-like kinematics.

Signal: a Higgs-like resonance (mass ~ N(125, 15) GeV) decays isotropically
in its rest frame into two b-jets, so the b-pair invariant mass peaks at the
resonance mass and the pair is collimated.  Missing transverse energy has a
long tail (neutrino plus two invisible particles).

Background (top-quark like): the two b-jets come from different decays and
are drawn independently, giving a broad b-pair mass and wide angular
separation; missing energy comes from one neutrino.

Half of all events carry an extra jet; jets j1..j3 are the b-jets plus the
extra jet ordered by transverse momentum, so in 6-node events j1/j2 repeat
the b-jet kinematics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..physics import boost, four_vector, from_four_vector, wrap_phi
from .events import (ETA, MASS, PHI, PT, QUANTILE, SIGMA, BackgroundKind, EventGraph, Label,
                     kinds_for)


@dataclass(frozen=True)
class GeneratorConfig:
    higgs_mass: float = 125.0
    higgs_width: float = 15.0
    extra_jet_fraction: float = 0.5
    signal_btag: tuple[float, float] = (5.0, 1.1)
    background_btag: tuple[float, float] = (3.5, 1.2)
    background_pt_scale: float = 45.0
    background_eta_width: float = 2.6


def _bjet_mass(rng, n):
    return 4.8 + rng.gamma(2.0, 3.0, n)


def _signal_bjets(rng, n, cfg):
    m_h = np.maximum(rng.normal(cfg.higgs_mass, cfg.higgs_width, n), 50.0)
    pt_h = 60.0 + rng.gamma(3.0, 50.0, n)
    eta_h = rng.normal(0.0, 1.0, n)
    phi_h = rng.uniform(-np.pi, np.pi, n)
    m1, m2 = _bjet_mass(rng, n), _bjet_mass(rng, n)
    # two-body decay in the rest frame
    p_star = np.sqrt((m_h**2 - (m1 + m2) ** 2) * (m_h**2 - (m1 - m2) ** 2)) / (2.0 * m_h)
    cos_t = rng.uniform(-1.0, 1.0, n)
    sin_t = np.sqrt(1.0 - cos_t**2)
    az = rng.uniform(0.0, 2.0 * np.pi, n)
    direction = np.stack([sin_t * np.cos(az), sin_t * np.sin(az), cos_t], axis=-1)
    p1 = np.concatenate([np.sqrt(m1**2 + p_star**2)[:, None], p_star[:, None] * direction], axis=-1)
    p2 = np.concatenate([np.sqrt(m2**2 + p_star**2)[:, None], -p_star[:, None] * direction], axis=-1)
    higgs = four_vector(pt_h, eta_h, phi_h, m_h)
    beta = higgs[:, 1:] / higgs[:, :1]
    b1 = np.stack(from_four_vector(boost(p1, beta))[:3] + (m1,), axis=-1)
    b2 = np.stack(from_four_vector(boost(p2, beta))[:3] + (m2,), axis=-1)
    return b1, b2


def _background_bjets(rng, n, kind, cfg):
    soft = 1.0 if kind is BackgroundKind.TTBAR else 0.8
    scale, width = cfg.background_pt_scale, cfg.background_eta_width
    b1 = np.stack([20.0 + rng.gamma(2.0, scale, n), rng.normal(0.0, width, n),
                   rng.uniform(-np.pi, np.pi, n), _bjet_mass(rng, n)], axis=-1)
    b2 = np.stack([20.0 + rng.gamma(2.0, scale * soft, n), rng.normal(0.0, width, n),
                   rng.uniform(-np.pi, np.pi, n), _bjet_mass(rng, n)], axis=-1)
    return b1, b2


def _build(rng, n, label, cfg, bkg_kind=None):
    signal = label == Label.SIGNAL
    if signal:
        b1, b2 = _signal_bjets(rng, n, cfg)
        q_b = rng.beta(*cfg.signal_btag, (n, 2))
        lep = np.stack([10.0 + rng.gamma(2.0, 28.0, n), rng.normal(0.0, 1.1, n)], axis=-1)
        met = 10.0 + rng.gamma(2.0, 50.0, n)
        extra_eta = rng.normal(0.0, 1.0, n)
    else:
        b1, b2 = _background_bjets(rng, n, bkg_kind, cfg)
        q_b = rng.beta(*cfg.background_btag, (n, 2))
        lep = np.stack([10.0 + rng.gamma(2.0, 25.0, n), rng.normal(0.0, 1.2, n)], axis=-1)
        met = 10.0 + rng.gamma(2.0, 30.0, n)
        extra_eta = rng.normal(0.0, 2.0, n)
    lep_phi = rng.uniform(-np.pi, np.pi, n)
    met_phi = rng.uniform(-np.pi, np.pi, n)
    has_extra = rng.random(n) < cfg.extra_jet_fraction
    extra = np.stack([20.0 + rng.gamma(1.5, 25.0, n), extra_eta,
                      rng.uniform(-np.pi, np.pi, n), rng.beta(1.0, 3.0, n)], axis=-1)
    # leading b-jet first
    swap = b2[:, 0] > b1[:, 0]
    b1[swap], b2[swap] = b2[swap].copy(), b1[swap].copy()
    q_b[swap] = q_b[swap][:, ::-1]

    events = []
    for i in range(n):
        jets = [(b1[i, 0], b1[i, 1], b1[i, 2], q_b[i, 0]), (b2[i, 0], b2[i, 1], b2[i, 2], q_b[i, 1])]
        if has_extra[i]:
            jets.append(tuple(extra[i]))
        jets.sort(key=lambda j: -j[0])
        kinds = kinds_for(len(jets) + 4)
        f = np.zeros((len(kinds), 6))
        for r, j in enumerate(jets):
            f[r, :4] = j
        r = len(jets)
        for b, q in ((b1[i], q_b[i, 0]), (b2[i], q_b[i, 1])):
            f[r, [PT, ETA, PHI, QUANTILE, MASS]] = (b[0], b[1], b[2], q, b[3])
            r += 1
        f[r, [PT, ETA, PHI]] = (lep[i, 0], lep[i, 1], lep_phi[i])
        ht = sum(j[0] for j in jets) + lep[i, 0]
        f[r + 1, [PT, PHI, SIGMA]] = (met[i], met_phi[i], 0.5 * np.sqrt(ht) * np.exp(rng.normal(0.0, 0.1)))
        f[:, PHI] = wrap_phi(f[:, PHI])
        events.append(EventGraph(kinds, f, label, bkg_kind))
    return events


def generate_synthetic(n_signal: int, n_background: int, seed: int,
                       config: GeneratorConfig | None = None) -> list[EventGraph]:
    """Shuffled mix of ``n_signal`` signal and ``n_background`` background events.

    Background is split evenly between ttbar-like and single-top-like events
    (ttbar takes the extra event when the count is odd).
    """
    if n_signal < 0 or n_background < 0:
        raise ValueError("event counts must be non-negative")
    cfg = config or GeneratorConfig()
    rng = np.random.default_rng(seed)
    n_tt = n_background - n_background // 2
    events = (_build(rng, n_signal, Label.SIGNAL, cfg)
              + _build(rng, n_tt, Label.BACKGROUND, cfg, BackgroundKind.TTBAR)
              + _build(rng, n_background - n_tt, Label.BACKGROUND, cfg, BackgroundKind.SINGLETOP))
    order = rng.permutation(len(events))
    return [events[i] for i in order]
