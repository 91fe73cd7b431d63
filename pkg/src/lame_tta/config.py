"""Key-value config files for scenarios and scenario families.

Format: UTF-8 text, one ``key = value`` per line, ``#`` comments. Unknown
keys are rejected. The ``source`` value is either a path to an embedding
container or an inline synthetic spec such as::

    synthetic:K=8,d=16,n_per_class=600,spread=0.35,rotation=0.5,noise=0.25
"""

from __future__ import annotations

from dataclasses import dataclass

from .mapping import ClassMapping, load_mapping
from .streams import ScenarioSpec, SyntheticConfig

SCENARIO_KEYS = ("source", "sampling", "zipf_s", "batch_size", "seed", "mapping")
FAMILY_KEYS = ("source", "scenarios", "zipf_s", "batch_size", "seeds", "mapping")

_SYNTH_FIELDS = {
    "k": ("K", int),
    "d": ("d", int),
    "n_per_class": ("n_per_class", int),
    "spread": ("cluster_spread", float),
    "rotation": ("rotation_angle", float),
    "noise": ("noise_sigma", float),
}


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def apply_overrides(kv: dict[str, str], overrides: list[str]) -> dict[str, str]:
    merged = dict(kv)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        merged[key.strip()] = value.strip()
    return merged


def parse_source(value: str) -> SyntheticConfig | str:
    if not value:
        raise ConfigError("source must not be empty")
    if value == "synthetic":
        return SyntheticConfig()
    if value.startswith("synthetic:"):
        kwargs = {}
        for part in value[len("synthetic:"):].split(","):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise ConfigError(f"bad synthetic parameter {part!r}")
            key, val = (s.strip() for s in part.split("=", 1))
            if key.lower() not in _SYNTH_FIELDS:
                raise ConfigError(f"unknown synthetic parameter {key!r}")
            name, cast = _SYNTH_FIELDS[key.lower()]
            try:
                kwargs[name] = cast(val)
            except ValueError:
                raise ConfigError(f"bad value for synthetic parameter {key!r}: {val!r}") from None
        return SyntheticConfig(**kwargs)
    return value


def _parse_zipf(value: str) -> float | None:
    if value.lower() in ("", "none", "off"):
        return None
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"bad zipf_s value {value!r}") from None


def _load_mapping(value: str) -> ClassMapping | None:
    if value.lower() in ("", "none"):
        return None
    return load_mapping(value)


def scenario_from_kv(kv: dict[str, str]) -> ScenarioSpec:
    unknown = set(kv) - set(SCENARIO_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    if "source" not in kv:
        raise ConfigError("scenario config needs a 'source' key")
    return ScenarioSpec(
        source=parse_source(kv["source"]),
        sampling=kv.get("sampling", "iid"),
        prior_shift=_parse_zipf(kv.get("zipf_s", "none")),
        batch_size=int(kv.get("batch_size", "64")),
        seed=int(kv.get("seed", "0")),
        mapping=_load_mapping(kv.get("mapping", "none")),
    )


@dataclass(frozen=True)
class FamilyConfig:
    """A set of scenario variants sharing one data source.

    ``scenarios`` holds letters from the A/B/C/D convention (A = i.i.d.,
    B = non-i.i.d., C = i.i.d. + prior shift, D = non-i.i.d. + prior
    shift).
    """

    source: SyntheticConfig | str
    scenarios: tuple[str, ...] = ("A", "B", "C", "D")
    zipf_s: float = 1.0
    batch_size: int = 32
    seeds: tuple[int, ...] = (0,)
    mapping: ClassMapping | None = None


def family_from_kv(kv: dict[str, str]) -> FamilyConfig:
    unknown = set(kv) - set(FAMILY_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    if "source" not in kv:
        raise ConfigError("family config needs a 'source' key")
    letters = tuple(
        s.strip().upper() for s in kv.get("scenarios", "A,B,C,D").split(",") if s.strip()
    )
    for letter in letters:
        if letter not in ("A", "B", "C", "D"):
            raise ConfigError(f"unknown scenario letter {letter!r} (use A, B, C, D)")
    try:
        seeds = tuple(int(s) for s in kv.get("seeds", "0").split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"bad seeds list {kv.get('seeds')!r}") from None
    if not seeds:
        raise ConfigError("seeds list is empty")
    zipf = _parse_zipf(kv.get("zipf_s", "1.0"))
    if zipf is None and any(letter in ("C", "D") for letter in letters):
        raise ConfigError("prior-shift scenarios need a zipf_s value")
    return FamilyConfig(
        source=parse_source(kv["source"]),
        scenarios=letters,
        zipf_s=zipf if zipf is not None else 1.0,
        batch_size=int(kv.get("batch_size", "32")),
        seeds=seeds,
        mapping=_load_mapping(kv.get("mapping", "none")),
    )


def read_config(path, overrides: list[str] | None = None) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        kv = parse_kv(fh.read())
    return apply_overrides(kv, overrides or [])
