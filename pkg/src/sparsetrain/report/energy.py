"""Linear event-count energy model."""

import configparser
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError

# event name in CycleStats.events -> coefficient field
EVENT_COEFFS = {
    "macs": "pj_per_mac",
    "sram_bytes": "pj_per_sram_byte",
    "broadcast_bytes": "pj_per_broadcast_byte",
    "offset_decodes": "pj_per_offset_decode",
    "bitmap_tests": "pj_per_bitmap_test",
}


@dataclass(frozen=True)
class EnergyModel:
    """Picojoules per event. The defaults are rough placeholders, not measured values."""

    pj_per_mac: float = 1.0
    pj_per_sram_byte: float = 0.5
    pj_per_broadcast_byte: float = 2.0
    pj_per_offset_decode: float = 0.05
    pj_per_bitmap_test: float = 0.01
    static_pj_per_cycle: float = 0.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or v < 0:
                raise ConfigError(f"energy coefficient {f.name}={v!r} must be a non-negative number")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown energy keys: {sorted(unknown)}")
        try:
            return cls(**{k: float(v) for k, v in d.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad energy coefficient: {exc}") from exc

    @classmethod
    def from_file(cls, path):
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            return cls.from_dict(json.loads(text))
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not text.lstrip().startswith("["):
            text = "[energy]\n" + text
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        values = {}
        for section in parser.sections():
            values.update(parser[section])
        return cls.from_dict(values)


def energy_estimate(events, cycles, model):
    """Per-category picojoules plus ``total``."""
    out = {}
    for event, coeff in EVENT_COEFFS.items():
        out[event] = float(events.get(event, 0)) * getattr(model, coeff)
    out["static"] = float(cycles) * model.static_pj_per_cycle
    out["total"] = sum(out.values())
    return out
