"""Named codec presets.

``normal`` and ``big`` differ only in the grouping pattern (3 vs 6 groups per
scale); ``extra`` doubles the network width, the mixture count, and adds a
fourth scale.  Patch size bounds the working-set of one coding unit; patches
are coded independently.
"""

from __future__ import annotations

from dataclasses import dataclass

from .network import NetConfig

PROFILE_IDS = {"normal": 0, "big": 1, "extra": 2, "custom": 255}
PROFILE_NAMES = {v: k for k, v in PROFILE_IDS.items()}


@dataclass(frozen=True)
class Profile:
    name: str
    scales: int
    grouping: str
    width: int
    mixtures: int
    patch_size: int
    resblocks: int = 4
    groups: int = 3

    def net_config(self, **overrides) -> NetConfig:
        fields = dict(
            width=self.width,
            mixtures=self.mixtures,
            scales=self.scales,
            resblocks=self.resblocks,
            grouping=self.grouping,
            groups=self.groups,
        )
        fields.update(overrides)
        return NetConfig(**fields)

    @property
    def profile_id(self) -> int:
        return PROFILE_IDS.get(self.name, PROFILE_IDS["custom"])


PROFILES = {
    "normal": Profile("normal", scales=3, grouping="fixed_a", width=64, mixtures=5, patch_size=496),
    "big": Profile("big", scales=3, grouping="fixed_b", width=64, mixtures=5, patch_size=496),
    "extra": Profile("extra", scales=4, grouping="fixed_b", width=128, mixtures=10, patch_size=256),
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown profile {name!r}; available: {sorted(PROFILES)}") from None


def custom_profile(width: int, mixtures: int, scales: int, resblocks: int = 4,
                   grouping: str = "fixed_a", groups: int = 3,
                   patch_size: int = 496) -> Profile:
    return Profile("custom", scales=scales, grouping=grouping, width=width,
                   mixtures=mixtures, patch_size=patch_size, resblocks=resblocks,
                   groups=groups)
