"""Collider kinematics: azimuth wrapping, angular distance, invariant mass.

All functions are vectorised over numpy arrays and also accept Python floats.
Momenta are in GeV.
"""

from __future__ import annotations

import numpy as np

# clamped negative radicands seen by invariant_mass since import
radicand_warnings = 0


def wrap_phi(phi):
    """Map angles into (-pi, pi]."""
    out = np.mod(np.asarray(phi, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out <= -np.pi, np.pi, out)
    return out if out.ndim else float(out)


def delta_r(eta1, phi1, eta2, phi2):
    deta = np.asarray(eta1, dtype=np.float64) - eta2
    dphi = wrap_phi(np.asarray(phi1, dtype=np.float64) - phi2)
    out = np.sqrt(deta * deta + dphi * dphi)
    return out if np.ndim(out) else float(out)


def four_vector(pt, eta, phi, mass):
    """(E, px, py, pz) from transverse momentum, pseudorapidity, azimuth and mass."""
    pt, eta, phi, mass = (np.asarray(v, dtype=np.float64) for v in (pt, eta, phi, mass))
    px = pt * np.cos(phi)
    py = pt * np.sin(phi)
    pz = pt * np.sinh(eta)
    e = np.sqrt(mass * mass + (pt * np.cosh(eta)) ** 2)
    return np.stack([e, px, py, pz], axis=-1)


def from_four_vector(p):
    """Inverse of :func:`four_vector`; returns ``(pt, eta, phi, mass)``."""
    p = np.asarray(p, dtype=np.float64)
    e, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    pt = np.hypot(px, py)
    eta = np.arcsinh(pz / pt)
    phi = wrap_phi(np.arctan2(py, px))
    m2 = e * e - px * px - py * py - pz * pz
    return pt, eta, phi, np.sqrt(np.maximum(m2, 0.0))


def invariant_mass(p1, p2):
    """Mass of the summed four-vectors; a negative radicand is clamped to 0."""
    global radicand_warnings
    s = np.asarray(p1, dtype=np.float64) + np.asarray(p2, dtype=np.float64)
    m2 = s[..., 0] ** 2 - s[..., 1] ** 2 - s[..., 2] ** 2 - s[..., 3] ** 2
    neg = m2 < 0
    if np.any(neg):
        radicand_warnings += int(np.count_nonzero(neg))
        m2 = np.where(neg, 0.0, m2)
    out = np.sqrt(m2)
    return out if np.ndim(out) else float(out)


def boost(p, beta):
    """Lorentz-boost four-vectors ``p`` by velocity ``beta`` (rows broadcast)."""
    p = np.asarray(p, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    b2 = np.sum(beta * beta, axis=-1, keepdims=True)
    gamma = 1.0 / np.sqrt(1.0 - b2)
    bp = np.sum(beta * p[..., 1:], axis=-1, keepdims=True)
    safe_b2 = np.where(b2 > 0, b2, 1.0)
    coef = np.where(b2 > 0, (gamma - 1.0) / safe_b2, 0.0)
    e = gamma * (p[..., :1] + bp)
    vec = p[..., 1:] + coef * bp * beta + gamma * beta * p[..., :1]
    return np.concatenate([e, vec], axis=-1)
