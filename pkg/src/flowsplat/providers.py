"""Flow observation providers: synthetic oracle and precomputed-file sources.

A provider answers ``observe(frame_i, frame_j)`` with the observed flow field
mapping frame i pixels into frame j, an additive correction field (zero unless
supplied externally), and per-pixel confidence weights. Weights are zero where
no correspondence exists (out of frame, occluded).
"""

from __future__ import annotations

import numpy as np

from .synthetic import SyntheticScene


class SyntheticFlowProvider:
    """Exact scene flows with optional seeded noise and outlier injection.

    With ``oracle_weights=True`` the confidence weights reflect the injected
    noise model (proportional to inverse variance, outliers downweighted);
    otherwise weights are uniform over usable pixels. Observations are
    deterministic per (seed, i, j), independent of query order.
    """

    def __init__(self, scene: SyntheticScene, n_frames: int,
                 noise_sigma: float = 0.0, outlier_frac: float = 0.0,
                 outlier_mag: float = 12.0, oracle_weights: bool = True,
                 seed: int = 0):
        self.scene = scene
        self.poses = scene.trajectory(n_frames)
        self.noise_sigma = noise_sigma
        self.outlier_frac = outlier_frac
        self.outlier_mag = outlier_mag
        self.oracle_weights = oracle_weights
        self.seed = seed
        self._cache: dict[tuple[int, int], tuple] = {}

    def pose(self, idx: int):
        return self.poses[idx]

    def observe(self, i: int, j: int):
        key = (i, j)
        if key in self._cache:
            flow, corr, wts = self._cache[key]
            return flow.copy(), corr.copy(), wts.copy()
        flow, visible = self.scene.flow_pair(self.poses[i], self.poses[j])
        flow = flow.copy()
        H, W = flow.shape[:2]
        var = np.full((H, W), max(self.noise_sigma, 1e-3) ** 2)
        rng = np.random.default_rng([self.seed, 977, i, j])
        if self.noise_sigma > 0:
            flow += rng.normal(0.0, self.noise_sigma, flow.shape)
        if self.outlier_frac > 0:
            n_out = int(round(self.outlier_frac * visible.sum()))
            vis_idx = np.flatnonzero(visible.ravel())
            chosen = rng.choice(vis_idx, size=min(n_out, vis_idx.size), replace=False)
            out_mask = np.zeros(H * W, dtype=bool)
            out_mask[chosen] = True
            out_mask = out_mask.reshape(H, W)
            flow[out_mask] = rng.uniform(-self.outlier_mag, self.outlier_mag,
                                         (out_mask.sum(), 2))
            var[out_mask] += self.outlier_mag**2 / 3.0
        if self.oracle_weights:
            w = np.where(visible, 1e-6 / var, 0.0)
            w /= max(w.max(), 1e-30)
        else:
            w = visible.astype(np.float64)
        weights = np.repeat(w[..., None], 2, axis=-1)
        corr = np.zeros_like(flow)
        self._cache[key] = (flow, corr, weights)
        return flow.copy(), corr.copy(), weights.copy()


class PrecomputedFlowProvider:
    """Flow observations read from the binary edge-record format.

    Records are keyed by input frame indices; see ``fileio.read_flow_records``
    for the wire format.
    """

    def __init__(self, records: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]):
        self.records = records

    @classmethod
    def from_file(cls, path):
        from .fileio import read_flow_records

        return cls(read_flow_records(path))

    def observe(self, i: int, j: int):
        try:
            flow, weights = self.records[(i, j)]
        except KeyError:
            raise KeyError(f"no flow record for frame pair ({i}, {j})") from None
        return flow.copy(), np.zeros_like(flow), weights.copy()
