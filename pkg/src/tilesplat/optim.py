"""Adam with independent parameter groups and densification-aware resizing.

Moment arrays stay congruent with the splat arrays: pruned/split rows are
dropped, rows for new splats start at zero. Rows whose gradient is non-finite
are skipped (moments untouched) and counted rather than poisoning the state.
"""

from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15

SPLAT_GROUPS = ("positions", "log_scales", "rotations", "opacity_logits", "colors")

DEFAULT_LRS = {
    # 3DGS-convention defaults; positions additionally scale with scene
    # extent and decay exponentially (see position_lr).
    "positions": 1.6e-4,
    "log_scales": 5e-3,
    "rotations": 1e-3,
    "opacity_logits": 5e-2,
    "colors": 2.5e-3,
    "pose_rot": 1e-4,
    "pose_trans": 1e-3,
}

POSITION_LR_FINAL_RATIO = 1.6e-6 / 1.6e-4


def position_lr(base: float, iteration: int, max_iter: int) -> float:
    """Exponential decay from base to base * 1e-2 over max_iter."""
    t = min(max(iteration / max(max_iter, 1), 0.0), 1.0)
    return base * POSITION_LR_FINAL_RATIO**t


class Adam:
    def __init__(self, lrs: dict[str, float] | None = None):
        self.lrs = dict(DEFAULT_LRS)
        if lrs:
            self.lrs.update(lrs)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._steps: dict[str, int] = {}
        self.skipped_rows = 0

    def _state(self, name, param):
        if name not in self._m:
            self._m[name] = np.zeros_like(param)
            self._v[name] = np.zeros_like(param)
            self._steps[name] = 0
        if self._m[name].shape != param.shape:
            raise ValueError(
                f"group {name}: moment shape {self._m[name].shape} does not "
                f"match parameter shape {param.shape}; resize after densify")
        return self._m[name], self._v[name]

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray],
             lr_overrides: dict[str, float] | None = None) -> int:
        """In-place bias-corrected Adam update; returns skipped row count."""
        skipped = 0
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            m, v = self._state(name, p)
            lr = (lr_overrides or {}).get(name, self.lrs.get(name, 1e-3))
            self._steps[name] += 1
            t = self._steps[name]

            if g.ndim == 0 or p.ndim == 0:
                raise ValueError(f"group {name}: scalar parameters unsupported")
            finite = np.isfinite(g).reshape(len(g), -1).all(axis=1)
            n_bad = int((~finite).sum())
            if n_bad:
                skipped += n_bad
            m[finite] = BETA1 * m[finite] + (1 - BETA1) * g[finite]
            v[finite] = BETA2 * v[finite] + (1 - BETA2) * g[finite] ** 2
            m_hat = m[finite] / (1 - BETA1**t)
            v_hat = v[finite] / (1 - BETA2**t)
            p[finite] -= lr * m_hat / (np.sqrt(v_hat) + EPS)

            if name == "rotations":  # skipped rows stay bitwise untouched
                norms = np.linalg.norm(p[finite], axis=1, keepdims=True)
                p[finite] = np.divide(p[finite], norms, where=norms > 0)
        self.skipped_rows += skipped
        return skipped

    def resize(self, decisions) -> None:
        """Mirror a densify/prune mutation on the splat-group moments.

        `decisions` is the list returned by apply_decisions, ordered by the
        pre-mutation splat id; new rows (clones then split children) get
        zero moments.
        """
        n_old = len(decisions)
        keep = np.array([d.action not in ("prune", "split") for d in decisions])
        n_clones = sum(d.action == "clone" for d in decisions)
        n_children = 2 * sum(d.action == "split" for d in decisions)
        for name in SPLAT_GROUPS:
            if name not in self._m:
                continue
            if len(self._m[name]) != n_old:
                raise ValueError(
                    f"group {name}: {len(self._m[name])} moment rows but "
                    f"{n_old} decisions")
            for store in (self._m, self._v):
                old = store[name]
                zeros = np.zeros((n_clones + n_children,) + old.shape[1:])
                store[name] = np.concatenate([old[keep], zeros])

    def reset_group(self, name: str) -> None:
        if name in self._m:
            self._m[name][:] = 0.0
            self._v[name][:] = 0.0
            self._steps[name] = 0

    def moments(self, name):
        return self._m.get(name), self._v.get(name)
