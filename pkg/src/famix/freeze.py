"""Which backbone stages are trained, per protocol."""
from __future__ import annotations

from dataclasses import dataclass

from famix.errors import ConfigurationError
from famix.models import GROUPS, SegmentationNet

ALL = frozenset(GROUPS)


@dataclass(frozen=True)
class FreezePolicy:
    """Trainable stage sets, one per training phase.

    ``phases`` is a tuple of ``(trainable_groups, fraction_of_budget)``.
    Single-phase presets have one entry with fraction 1.
    """

    name: str
    phases: tuple

    def __post_init__(self):
        if not self.phases:
            raise ConfigurationError(f"freeze policy {self.name!r} has no phases")
        total = 0.0
        for groups, frac in self.phases:
            unknown = set(groups) - ALL
            if unknown:
                raise ConfigurationError(f"unknown stage(s) {sorted(unknown)} in {self.name!r}")
            if "decoder" not in groups:
                raise ConfigurationError(f"{self.name!r}: the decoder must always be trainable")
            total += frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"{self.name!r}: phase fractions sum to {total}, not 1")

    @property
    def trainable(self) -> frozenset:
        """Stages trained in at least one phase."""
        return frozenset().union(*(frozenset(g) for g, _ in self.phases))

    @property
    def frozen(self) -> frozenset:
        return ALL - self.trainable

    def phase_at(self, iteration: int, total: int) -> int:
        edge = 0.0
        for k, (_, frac) in enumerate(self.phases):
            edge += frac * total
            if iteration < round(edge):
                return k
        return len(self.phases) - 1

    def phase_bounds(self, total: int) -> list:
        bounds, edge = [], 0.0
        for _, frac in self.phases:
            start = round(edge)
            edge += frac * total
            bounds.append((start, round(edge)))
        return bounds

    def apply(self, model: SegmentationNet, phase: int = 0) -> None:
        model.set_frozen(ALL - frozenset(self.phases[phase][0]))


def _single(name, trainable):
    return FreezePolicy(name, ((frozenset(trainable), 1.0),))


def _tail_from(stage):
    return GROUPS[GROUPS.index(stage):]


PRESETS = {
    "FAMIX": _single("FAMIX", ("layer4_tail", "decoder")),
    "FT": _single("FT", GROUPS),
    "DP": _single("DP", ("decoder",)),
    # sweep points name the frozen stages; L1-4' keeps only the last block of stage 4 trainable
    "L1": _single("L1", _tail_from("layer2")),
    "L1-2": _single("L1-2", _tail_from("layer3")),
    "L1-3": _single("L1-3", _tail_from("layer4")),
    "L1-4'": _single("L1-4'", ("layer4_tail", "decoder")),
    "L1-4": _single("L1-4", ("decoder",)),
}
FREEZE_SWEEP = ("L1", "L1-2", "L1-3", "L1-4'", "L1-4")


def dp_ft(split: float = 0.5) -> FreezePolicy:
    """Decoder probing for ``split`` of the budget, then full fine-tuning."""
    if not 0 < split < 1:
        raise ConfigurationError(f"DP_FT split must lie in (0, 1), got {split}")
    return FreezePolicy("DP_FT", ((frozenset(("decoder",)), split), (ALL, 1.0 - split)))


PRESETS["DP_FT"] = dp_ft()


def get_policy(name: str, dp_ft_split: float = 0.5) -> FreezePolicy:
    if name == "DP_FT":
        return dp_ft(dp_ft_split)
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown freeze preset {name!r}; choose from {sorted(PRESETS)}") from None
