"""Fingertip tactile arrays: 5 pads x 12x10 taxels x 3-axis force.

Each fingertip carries a fixed taxel grid on its pad. A contact's force is
spread over the grid with a Gaussian kernel centered at the contact point
(normalized over the grid, so on-pad force is conserved before flooring),
decomposed per taxel into (shear-u, shear-v, normal) in the pad frame, and
floored: any component with magnitude below the sensor floor reads exactly 0.
"""

from __future__ import annotations

import numpy as np

from .contact import ContactBatch
from .hand import HandModel

ROWS, COLS = 12, 10
TAXELS = ROWS * COLS


def synth_tactile(hand: HandModel, fk, contacts: ContactBatch | None,
                  f_tip: np.ndarray) -> np.ndarray:
    """-> (N, 5, 12, 10, 3) in newtons. Zero where no contact."""
    p = hand.params
    n_env = fk.tip_pos.shape[0]
    out = np.zeros((n_env, 5, ROWS, COLS, 3))
    if contacts is None or not contacts.active.any():
        return out

    pad_n, pad_u, pad_v = hand.pad_frames(fk)
    cdir = -contacts.normal                      # tip center -> contact point
    u = p.tip_radius * np.sum(cdir * pad_u, axis=-1)
    v = p.tip_radius * np.sum(cdir * pad_v, axis=-1)

    pitch = p.taxel_pitch
    vi = (np.arange(ROWS) - (ROWS - 1) / 2) * pitch
    uj = (np.arange(COLS) - (COLS - 1) / 2) * pitch
    dv = vi[None, None, :, None] - v[..., None, None]
    du = uj[None, None, None, :] - u[..., None, None]
    sigma = p.tactile_sigma * pitch
    w = np.exp(-(du * du + dv * dv) / (2.0 * sigma * sigma))
    w_sum = w.sum(axis=(-1, -2), keepdims=True)
    w = w / np.maximum(w_sum, 1e-300)
    w = np.where(contacts.active[..., None, None], w, 0.0)

    f_u = np.sum(f_tip * pad_u, axis=-1)
    f_v = np.sum(f_tip * pad_v, axis=-1)
    f_n = -np.sum(f_tip * pad_n, axis=-1)        # compression into the pad is positive
    comp = np.stack([f_u, f_v, f_n], axis=-1)    # (N,5,3)
    out = w[..., None] * comp[:, :, None, None, :]
    out = np.where(np.abs(out) < p.tactile_floor, 0.0, out)
    return out


def flatten_tactile(t: np.ndarray) -> np.ndarray:
    """(N,5,12,10,3) -> (N, 1800)."""
    return t.reshape(t.shape[0], -1)


def downsample_summary(t: np.ndarray) -> np.ndarray:
    """Per-finger magnitude summary for the UI: (N,5,12,10,3) -> (N,5,6,5).

    2x2 taxel blocks, per-taxel vector magnitudes summed within each block.
    """
    mag = np.linalg.norm(t, axis=-1)
    n, f = mag.shape[0], mag.shape[1]
    return mag.reshape(n, f, 6, 2, 5, 2).sum(axis=(3, 5))
