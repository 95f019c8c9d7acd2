"""The progressive prediction model: one convolutional network per scale.

Each group step sees three inputs at the target scale's resolution -- the
value plane (predictions mixed with already-known true values), the truth
mask, and the running context map -- and produces the mixture-parameter map
for every pixel plus the next context map.  No normalization layers anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import grouping
from . import tensor as T
from .dmol import params_per_pixel
from .optim import ParamStore
from .tensor import Tensor


@dataclass(frozen=True)
class NetConfig:
    """Model shape: width C, mixture count K, scale count M, resblock depth R."""

    width: int = 64
    mixtures: int = 5
    scales: int = 3
    resblocks: int = 4
    grouping: str = "fixed_a"
    groups: int = 3                  # used by random/dynamic grouping only
    share_weights: bool = False
    subset_even: bool = False        # subset at (0,0) instead of (1,1)
    dynamic_ascending: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.mixtures < 1 or self.resblocks < 1 or self.scales < 1:
            raise ValueError("width, mixtures, resblocks and scales must all be >= 1")
        if self.grouping not in grouping.GROUPING_IDS:
            raise ValueError(f"unknown grouping method {self.grouping!r}")

    @property
    def q(self) -> int:
        return params_per_pixel(self.mixtures)

    @property
    def groups_per_scale(self) -> int:
        return grouping.group_count(self.grouping, self.groups)

    @property
    def subset_offset(self) -> tuple[int, int]:
        return grouping.SUBSET_EVEN if self.subset_even else grouping.SUBSET_ODD

    def with_grouping(self, method: str, groups: int | None = None) -> "NetConfig":
        return replace(self, grouping=method, groups=groups or self.groups)


def _scale_prefix(cfg: NetConfig, scale: int) -> str:
    return "shared" if cfg.share_weights else f"scale{scale}"


def init_weights(cfg: NetConfig, dtype=np.float32) -> ParamStore:
    """Fresh parameters: conv weights uniform(-b, b) with b = sqrt(1/(in*k^2)),
    biases zero, drawn from a PCG64 stream seeded by the config."""
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    store = ParamStore()

    def conv(name: str, out_ch: int, in_ch: int, k: int):
        bound = float(np.sqrt(1.0 / (in_ch * k * k)))
        store.add(name + ".w", rng.uniform(-bound, bound, (out_ch, in_ch, k, k)).astype(dtype))
        store.add(name + ".b", np.zeros(out_ch, dtype=dtype))

    c, q = cfg.width, cfg.q
    scale_range = [1] if cfg.share_weights else range(1, cfg.scales + 1)
    for s in scale_range:
        p = _scale_prefix(cfg, s)
        conv(f"{p}.stem", c, 3 + 1 + c, 3)
        for r in range(cfg.resblocks):
            conv(f"{p}.res{r}.conv1", c, c, 3)
            conv(f"{p}.res{r}.conv2", c, c, 3)
        conv(f"{p}.head_p", q, c, 1)
        conv(f"{p}.head_z", c, c, 3)
        if cfg.share_weights or s < cfg.scales:
            conv(f"{p}.ctx", c, c, 1)
    return store


def resblock(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """x + conv(relu(conv(x))); the additive skip carries no activation."""
    if w1.shape[0] != x.shape[1] or w2.shape[0] != x.shape[1]:
        raise ValueError(
            f"resblock must preserve channels: input has {x.shape[1]}, "
            f"convs produce {w1.shape[0]} and {w2.shape[0]}"
        )
    h = T.conv2d(x, w1, b1, padding=1)
    h = T.conv2d(T.relu(h), w2, b2, padding=1)
    return x + h


class ProgressiveModel:
    """Configuration plus parameters, with the per-step forward pass."""

    def __init__(self, cfg: NetConfig, store: ParamStore | None = None, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.store = store if store is not None else init_weights(cfg, dtype)

    def _p(self, scale: int, name: str) -> Tensor:
        return self.store.params[f"{_scale_prefix(self.cfg, scale)}.{name}"]

    def param_count(self) -> int:
        return self.store.num_values()

    def receptive_radius(self) -> int:
        # stem 3x3 plus two 3x3 convs per resblock feed the 1x1 p-head
        return 2 * self.cfg.resblocks + 2

    def forward_step(self, scale: int, xhat: Tensor, mask: Tensor, z: Tensor) -> tuple[Tensor, Tensor]:
        """One group step: (values, mask, context) -> (mixture params, context).

        All inputs share the target scale's spatial dims; ``xhat`` is the
        3-channel value plane in [-1, 1], ``mask`` the 1-channel truth mask,
        ``z`` the C-channel context.
        """
        c = self.cfg.width
        if xhat.shape[1] != 3 or mask.shape[1] != 1 or z.shape[1] != c:
            raise ValueError(
                f"forward_step expects channels (3, 1, {c}); got "
                f"{xhat.shape[1]}, {mask.shape[1]}, {z.shape[1]}"
            )
        if not (xhat.shape[2:] == mask.shape[2:] == z.shape[2:]):
            raise ValueError(
                f"spatial dims differ: {xhat.shape[2:]} vs {mask.shape[2:]} vs {z.shape[2:]}"
            )
        h = T.concat_channels([xhat, mask, z])
        h = T.relu(T.conv2d(h, self._p(scale, "stem.w"), self._p(scale, "stem.b"), 1))
        for r in range(self.cfg.resblocks):
            h = resblock(
                h,
                self._p(scale, f"res{r}.conv1.w"), self._p(scale, f"res{r}.conv1.b"),
                self._p(scale, f"res{r}.conv2.w"), self._p(scale, f"res{r}.conv2.b"),
            )
        p = T.conv2d(h, self._p(scale, "head_p.w"), self._p(scale, "head_p.b"), 0)
        z_next = T.conv2d(h, self._p(scale, "head_z.w"), self._p(scale, "head_z.b"), 1)
        return p, z_next

    def initial_context(self, scale: int, z_finer: Tensor | None,
                        batch: int = 1, hw: tuple[int, int] | None = None) -> Tensor:
        """Starting context for one scale's group loop.

        The deepest scale starts from zeros; every other scale upsamples the
        final context of the scale above and passes it through a learned 1x1
        conv so the hand-off is trainable.
        """
        if scale == self.cfg.scales:
            if hw is None:
                raise ValueError("the deepest scale needs explicit target dims")
            return Tensor(np.zeros((batch, self.cfg.width, hw[0], hw[1]), dtype=self.dtype))
        if z_finer is None:
            raise ValueError(f"scale {scale} needs the context from scale {scale + 1}")
        up = T.nearest_upsample2x(z_finer)
        out = T.conv2d(up, self._p(scale, "ctx.w"), self._p(scale, "ctx.b"), 0)
        if hw is not None and out.shape[2:] != tuple(hw):
            raise ValueError(f"context dims {out.shape[2:]} do not match target {hw}")
        return out


def upsample_values(subset: np.ndarray, offset=grouping.SUBSET_ODD) -> tuple[np.ndarray, np.ndarray]:
    """Seed a scale's value plane by replicating the subset values 2x.

    Returns the (2H, 2W, 3) uint8 plane and the truth mask, which is set
    exactly at the positions the subset pixels occupy in the larger grid.
    """
    up = np.repeat(np.repeat(subset, 2, axis=0), 2, axis=1)
    mask = grouping.subset_mask(up.shape[0], up.shape[1], offset)
    return up, mask
