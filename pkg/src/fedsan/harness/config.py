"""Run configuration: FL settings plus arm and output directory.

Config files are flat key/value text, one `dotted.key value` pair per line
(# starts a comment).  The same dotted keys work as command-line overrides,
so a file is never required -- `fedsan run --set fl.rounds=5` is enough.
"""

import dataclasses

from ..fl_orchestrator import ARMS, FLConfig


@dataclasses.dataclass
class RunConfig:
    arm: str = "sanitizer"
    out_dir: str = "runs/run0"
    fl: FLConfig = dataclasses.field(default_factory=FLConfig)

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"unknown arm '{self.arm}' (choose from {ARMS})")


def _coerce(text, old):
    """Parse `text` with the type of the field's current value."""
    if isinstance(old, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a bool: '{text}'")
    if isinstance(old, int):
        return int(text)
    if isinstance(old, float):
        return float(text)
    return text


def set_dotted(rc, key, value):
    """Assign `value` (a string) to a dotted field path like 'fl.rounds'."""
    obj, parts = rc, key.split(".")
    for p in parts[:-1]:
        if not hasattr(obj, p):
            raise KeyError(f"unknown config section '{p}' in '{key}'")
        obj = getattr(obj, p)
    leaf = parts[-1]
    if not hasattr(obj, leaf):
        raise KeyError(f"unknown config key '{key}'")
    setattr(obj, leaf, _coerce(value, getattr(obj, leaf)))
    return rc


def parse_pairs(text):
    pairs = []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.replace("=", " ", 1).split(None, 1)
        if len(fields) != 2:
            raise ValueError(f"line {ln}: expected 'key value', got '{line}'")
        pairs.append((fields[0], fields[1].strip()))
    return pairs


def load_config(path=None, overrides=()):
    """Build a RunConfig from an optional file plus dotted overrides.

    Overrides are 'key=value' or 'key value' strings applied after the file,
    last one wins.
    """
    rc = RunConfig()
    if path is not None:
        with open(path) as fh:
            for key, value in parse_pairs(fh.read()):
                set_dotted(rc, key, value)
    for item in overrides:
        for key, value in parse_pairs(item):
            set_dotted(rc, key, value)
    rc.__post_init__()
    return rc


def config_text(rc):
    """Flat dotted dump of every field; load_config round-trips it."""
    lines = []
    for f in dataclasses.fields(rc):
        v = getattr(rc, f.name)
        if dataclasses.is_dataclass(v):
            for g in dataclasses.fields(v):
                lines.append(f"{f.name}.{g.name} {getattr(v, g.name)}")
        else:
            lines.append(f"{f.name} {v}")
    return "\n".join(lines) + "\n"
