"""Plain-text ``key = value`` config blocks for dataclass configs."""

import dataclasses


def parse_kv_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, (tuple, list)):
            v = ",".join(_fmt_item(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def _fmt_item(x):
    if isinstance(x, (tuple, list)):
        return ":".join(str(y) for y in x)
    return str(x)


def coerce(value: str, default, type_hint=None):
    """Parse ``value`` to the type of ``default``."""
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, (tuple, list)):
        items = [s.strip() for s in value.split(",") if s.strip()]
        if default and isinstance(default[0], (tuple, list)):
            return tuple(tuple(float(y) for y in s.split(":")) for s in items)
        if default and isinstance(default[0], int):
            return tuple(int(s) for s in items)
        return tuple(float(s) for s in items)
    return value


def build(cls, values: dict, strict: bool = True):
    """Instantiate dataclass ``cls`` from string ``values``."""
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if strict and unknown:
        raise KeyError(f"unknown config key(s) for {cls.__name__}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for k, v in values.items():
        if k in names:
            kwargs[k] = coerce(v, getattr(defaults, k)) if isinstance(v, str) else v
    return cls(**kwargs)


def field_names(cls) -> list:
    return [f.name for f in dataclasses.fields(cls)]

