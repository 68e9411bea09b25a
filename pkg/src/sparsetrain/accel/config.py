"""Node geometry and timing parameters."""

import configparser
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError

OPERAND_BYTES = 2  # half-precision neurons and synapses
OFFSET_BITS = 5
WDU_INTERVAL_CYCLES = 64


@dataclass(frozen=True)
class NodeConfig:
    Tx: int = 4
    Ty: int = 4
    lanes_per_pe: int = 16
    entries_per_group: int = 32
    groups: int = 2
    sram_bw_bytes_per_cycle: int = 84
    broadcast_bw_bytes_per_cycle: int = 768  # 512 GB/s at 667 MHz
    adder_latency_cycles: int = 4
    wr_threshold: float = 0.30
    wr_transfer_cost_bytes_per_element: int = 2
    clock_ghz: float = 0.667
    reconfigurable_tree: bool = True

    def __post_init__(self):
        for name in ("Tx", "Ty", "lanes_per_pe", "entries_per_group", "groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lanes_per_pe & (self.lanes_per_pe - 1):
            raise ConfigError(f"lanes_per_pe={self.lanes_per_pe} is not a power of two")
        if self.sram_bw_bytes_per_cycle <= 0 or self.broadcast_bw_bytes_per_cycle <= 0:
            raise ConfigError("bandwidths must be positive")
        if not 0.0 <= self.wr_threshold <= 1.0:
            raise ConfigError(f"wr_threshold={self.wr_threshold} outside [0, 1]")
        if self.adder_latency_cycles < 0 or self.wr_transfer_cost_bytes_per_element < 0:
            raise ConfigError("latencies and transfer costs must be non-negative")
        if self.clock_ghz <= 0:
            raise ConfigError("clock_ghz must be positive")

    @property
    def capacity(self):
        """Operand pairs one PE holds for a single output."""
        return self.lanes_per_pe * self.entries_per_group * self.groups

    @property
    def num_pes(self):
        return self.Tx * self.Ty

    @property
    def peak_ops_per_cycle(self):
        return self.num_pes * self.lanes_per_pe * 2

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(fields)
        if unknown:
            raise ConfigError(f"unknown node config keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in d.items():
            kwargs[key] = _coerce(key, raw, fields[key].type)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        """Load a flat ``key = value`` file (an optional section header is ignored) or JSON."""
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            return cls.from_dict(json.loads(text))
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not text.lstrip().startswith("["):
            text = "[node]\n" + text
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        values = {}
        for section in parser.sections():
            values.update(parser[section])
        return cls.from_dict(values)


def _coerce(key, raw, typ):
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if name == "bool":
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if name == "int":
            return int(raw)
        return float(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
