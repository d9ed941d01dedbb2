"""File formats: binary timestamp streams, CSV tables and JSON configs.

Stream file layout (little-endian)::

    magic      4s   b"TTG1"
    version    u16  1
    channel    u8
    reserved   u8   0
    resolution u32  ps per LSB
    count      u64
    events     count x u64, ascending, in ps
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .clockstats import AdevCurve
from .correlation import CorrelationHistogram, normalize_g2
from .simulator import ChannelConfig, DetectorConfig, ExperimentConfig, SourceConfig
from .timebase import ClockModel, PhaseSeries, TimestampStream

MAGIC = b"TTG1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBBIQ")
CONFIG_SCHEMA_ID = "tagcorr-config-1"
PRESETS = ("preset-a", "preset-b", "preset-c")


class StreamFormatError(ValueError):
    pass


class ConfigError(ValueError):
    """Config failed validation; ``path`` is the dotted location of the problem."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


def atomic_write(path, data: bytes | str):
    """Write a whole file via a temporary sibling and rename."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- streams -----------------------------------------------------------------


def encode_stream(stream: TimestampStream) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, stream.channel_id, 0, stream.resolution, len(stream))
    return header + stream.events.astype("<u8").tobytes()


def decode_stream(data: bytes) -> TimestampStream:
    if len(data) < _HEADER.size:
        raise StreamFormatError("file shorter than header")
    magic, version, channel, _, resolution, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise StreamFormatError(f"unsupported format version {version}")
    expected = _HEADER.size + 8 * count
    if len(data) != expected:
        raise StreamFormatError(f"expected {expected} bytes for {count} events, got {len(data)}")
    raw = np.frombuffer(data, dtype="<u8", offset=_HEADER.size, count=count)
    if count and raw.max() > np.iinfo(np.int64).max:
        raise StreamFormatError("timestamp beyond the supported 2**63 ps range")
    events = raw.astype(np.int64)
    bad = np.flatnonzero(np.diff(events) < 0)
    if bad.size:
        raise StreamFormatError(f"events not sorted at index {bad[0] + 1}")
    duration = int(events[-1] - events[0]) if count > 1 else 0
    try:
        return TimestampStream(channel, max(resolution, 1), events, duration)
    except ValueError as exc:
        raise StreamFormatError(str(exc)) from None


def write_stream(path, stream: TimestampStream):
    atomic_write(path, encode_stream(stream))


def read_stream(path) -> TimestampStream:
    return decode_stream(Path(path).read_bytes())


# --- CSV tables --------------------------------------------------------------


def _num(v) -> str:
    """Shortest round-tripping decimal; integers without a trailing ``.0``."""
    f = float(v)
    if f.is_integer() and abs(f) < 2**53:
        return str(int(f))
    return repr(f)


def histogram_csv(h: CorrelationHistogram) -> str:
    taus, g2 = normalize_g2(h)
    rows = ["tau_ps,counts,g2"]
    rows += [f"{_num(t)},{int(c)},{_num(g)}" for t, c, g in zip(taus, h.counts, g2)]
    return "\n".join(rows) + "\n"


def adev_csv(curve: AdevCurve) -> str:
    rows = ["tau_s,adev,n"]
    rows += [f"{_num(t)},{_num(a)},{int(n)}" for t, a, n in zip(curve.tau, curve.adev, curve.n)]
    return "\n".join(rows) + "\n"


def phase_csv(p: PhaseSeries) -> str:
    rows = ["t_s,x_s"] + [f"{_num(t)},{_num(x)}" for t, x in zip(p.t, p.x)]
    return "\n".join(rows) + "\n"


def read_phase_csv(path) -> PhaseSeries:
    """Read a ``t_s,x_s`` CSV. Samples must be evenly spaced."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "t_s,x_s":
            raise ValueError(f"expected header 't_s,x_s', got {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[0] < 2:
        raise ValueError("phase CSV needs at least two rows")
    t, x = data[:, 0], data[:, 1]
    steps = np.diff(t)
    tau0 = float(np.mean(steps))
    if not np.allclose(steps, tau0, rtol=1e-6, atol=0):
        raise ValueError("phase samples are not evenly spaced")
    return PhaseSeries(tau0, x)


# --- configs -----------------------------------------------------------------

_num_t = {"type": "number"}
_nonneg = {"type": "number", "minimum": 0}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_CLOCK = _obj({
    "phase_offset": _num_t,
    "frac_freq_offset": _num_t,
    "freq_drift_rate": _num_t,
    "white_phase_jitter": _nonneg,
    "quantization": {"type": "integer", "minimum": 1},
})
_DETECTOR = _obj({
    "efficiency": {"type": "number", "minimum": 0, "maximum": 1},
    "jitter": _nonneg,
    "dead_time": {"type": "integer", "minimum": 0},
    "dark_rate": _nonneg,
})
_CHANNEL = _obj({
    "delay": {"type": "integer", "minimum": 0},
    "transmission": {"type": "number", "minimum": 0, "maximum": 1},
})

CONFIG_SCHEMA = _obj(
    {
        "schema": {"const": CONFIG_SCHEMA_ID},
        "label": {"type": "string"},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "source": _obj(
            {
                "pair_rate": {"type": "number", "exclusiveMinimum": 0},
                "duration": {"type": "number", "exclusiveMinimum": 0},
                "start": _nonneg,
                "intrinsic_correlation_jitter": _nonneg,
            },
            required=("pair_rate", "duration"),
        ),
        "herald_channel": _CHANNEL,
        "signal_channel": _CHANNEL,
        "herald_detector": _DETECTOR,
        "signal_detector": _DETECTOR,
        "clock_a": _CLOCK,
        "clock_b": _CLOCK,
    },
    required=("schema", "source"),
)


def validate_config(doc: dict):
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(doc),
                    key=lambda e: list(e.absolute_path))
    if not errors:
        return
    err = errors[0]
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1]
        path = f"{path}.{missing}" if path else missing
    elif err.validator == "additionalProperties":
        extra = err.message.split("'")[1]
        path = f"{path}.{extra}" if path else extra
    raise ConfigError(path, err.message)


def config_from_dict(doc: dict, seed: int | None = None) -> ExperimentConfig:
    validate_config(doc)
    return ExperimentConfig(
        source=SourceConfig(**doc["source"]),
        herald_channel=ChannelConfig(**doc.get("herald_channel", {})),
        signal_channel=ChannelConfig(**doc.get("signal_channel", {})),
        herald_detector=DetectorConfig(**doc.get("herald_detector", {})),
        signal_detector=DetectorConfig(**doc.get("signal_detector", {})),
        clock_a=ClockModel(**doc.get("clock_a", {})),
        clock_b=ClockModel(**doc.get("clock_b", {})),
        seed=int(doc.get("seed", 0) if seed is None else seed),
        label=doc.get("label", ""),
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def fields(obj):
        return {k: getattr(obj, k) for k in obj.__dataclass_fields__}

    doc = {"schema": CONFIG_SCHEMA_ID}
    if cfg.label:
        doc["label"] = cfg.label
    doc["seed"] = cfg.seed
    for key in ("source", "herald_channel", "signal_channel", "herald_detector",
                "signal_detector", "clock_a", "clock_b"):
        doc[key] = fields(getattr(cfg, key))
    return doc


def preset_dict(name: str) -> dict:
    """Bundled preset config as a plain dict."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("tagcorr").joinpath("presets", f"{name}.json").read_text()
    return json.loads(text)


def load_config_dict(path_or_preset) -> dict:
    """Read a config file, or a bundled preset when given its name."""
    name = str(path_or_preset)
    stem = Path(name).name.removesuffix(".json")
    if not Path(name).exists() and stem in PRESETS:
        return preset_dict(stem)
    with open(name) as fh:
        return json.load(fh)


def load_config(path_or_preset, seed: int | None = None) -> ExperimentConfig:
    return config_from_dict(load_config_dict(path_or_preset), seed)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"
