"""Run configuration and the ``key = value`` record format.

Grammar, one item per line::

    # comment
    [section]
    key = value

Booleans are ``true``/``false``; there is no nesting. The same grammar is used
for configs and for the report files the CLI writes.
"""

import dataclasses
from dataclasses import dataclass, field

from kpft.layers import KINDS, AdapterSpec, LayerConfigError
from kpft.model import MODES, ModelError, ModelGeometry

TASK_KINDS = ("parity", "copy-class", "majority")
DTYPES = ("f32", "f64")


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-3
    warmup_steps: int = 0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 40
    steps: int = 2000
    eval_every: int = 100
    log_every: int = 100


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "parity"
    seq_len: int = 8
    train_size: int = 4000
    val_size: int = 500
    test_size: int = 1000
    subsample_size: int = 0  # 0 keeps the whole training pool


@dataclass(frozen=True)
class RunConfig:
    model: ModelGeometry = field(default_factory=ModelGeometry)
    adapter: AdapterSpec | None = field(default_factory=AdapterSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    seed: int = 0
    trial: int = 0
    mode: str = "standard"
    dtype: str = "f64"


SECTIONS = {
    "model": ModelGeometry,
    "adapter": AdapterSpec,
    "optim": OptimConfig,
    "task": TaskConfig,
}
RUN_KEYS = {"seed": int, "trial": int, "mode": str, "dtype": str}


# -- record grammar ----------------------------------------------------------------

def read_sections(text):
    """Parse into {section: {key: (raw value, line number)}} plus section header lines."""
    sections = {}
    headers = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            current = line[1:-1].strip()
            if current in sections:
                raise ConfigError(f"duplicate section [{current}]", lineno)
            sections[current] = {}
            headers[current] = lineno
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if current is None:
            raise ConfigError("key outside of any [section]", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", lineno)
        sections[current][key] = (value, lineno)
    return sections, headers


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def write_sections(sections):
    out = []
    for name, items in sections.items():
        if out:
            out.append("")
        out.append(f"[{name}]")
        out += [f"{k} = {format_value(v)}" for k, v in items.items()]
    return "\n".join(out) + "\n"


def read_record(text):
    """Plain {section: {key: raw string}} view of a record file."""
    sections, _ = read_sections(text)
    return {s: {k: v for k, (v, _) in items.items()} for s, items in sections.items()}


def _convert(raw, typ, key, line):
    try:
        if typ is bool:
            if raw not in ("true", "false"):
                raise ValueError
            return raw == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}", line) from None


def _build(cls, items, section):
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, (raw, line) in items.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r} in [{section}]", line)
        kwargs[key] = _convert(raw, type(defaults[key]), key, line)
    return kwargs


def _line_of(items, *keys, default=None):
    for key in keys:
        if key in items:
            return items[key][1]
    return default


def parse_config(text):
    """Parse and validate a run config; raise ConfigError naming the offending line."""
    sections, headers = read_sections(text)
    for name, items in sections.items():
        if name not in SECTIONS and name != "run":
            raise ConfigError(f"unknown section [{name}]", headers[name])

    model_items = sections.get("model", {})
    try:
        geometry = ModelGeometry(**_build(ModelGeometry, model_items, "model"))
    except ModelError as exc:
        raise ConfigError(str(exc), _line_of(model_items, "hidden", "heads", default=headers.get("model"))) from None

    adapter_items = dict(sections.get("adapter", {}))
    kind, kind_line = adapter_items.pop("kind", ("compacter", None))
    adapter = None
    if kind != "none":
        if kind not in KINDS:
            raise ConfigError(f"adapter kind must be one of {KINDS + ('none',)}, got {kind!r}", kind_line)
        kwargs = _build(AdapterSpec, adapter_items, "adapter")
        try:
            adapter = AdapterSpec(kind=kind, **kwargs)
            adapter.check(geometry.hidden, geometry.layers)
        except LayerConfigError as exc:
            msg = str(exc)
            if "drop_first_m" in msg:
                keys = ("drop_first_m",)
            elif "placement" in msg:
                keys = ("placement",)
            else:
                keys = ("n", "bottleneck", "rank")
            raise ConfigError(msg, _line_of(adapter_items, *keys, default=headers.get("adapter"))) from None
    elif adapter_items:
        key, (_, line) = next(iter(adapter_items.items()))
        raise ConfigError(f"adapter key {key!r} given with kind = none", line)

    optim_items = sections.get("optim", {})
    optim = OptimConfig(**_build(OptimConfig, optim_items, "optim"))
    for key in ("batch_size", "eval_every", "log_every"):
        if getattr(optim, key) < 1:
            raise ConfigError(f"{key} must be >= 1", _line_of(optim_items, key))
    for key in ("steps", "warmup_steps", "lr", "weight_decay", "eps"):
        if getattr(optim, key) < 0:
            raise ConfigError(f"{key} must be >= 0", _line_of(optim_items, key))
    if not (0 <= optim.beta1 < 1 and 0 <= optim.beta2 < 1):
        raise ConfigError("beta1 and beta2 must lie in [0, 1)", _line_of(optim_items, "beta1", "beta2"))

    task_items = sections.get("task", {})
    task = TaskConfig(**_build(TaskConfig, task_items, "task"))
    if task.kind not in TASK_KINDS:
        raise ConfigError(f"task kind must be one of {TASK_KINDS}", _line_of(task_items, "kind"))
    if not 1 <= task.seq_len <= geometry.max_seq:
        raise ConfigError(f"seq_len={task.seq_len} must lie in [1, max_seq={geometry.max_seq}]",
                          _line_of(task_items, "seq_len"))
    if min(task.train_size, task.val_size, task.test_size) < 1:
        raise ConfigError("split sizes must be >= 1", _line_of(task_items, "train_size", "val_size", "test_size"))
    if not 0 <= task.subsample_size <= task.train_size:
        raise ConfigError(f"subsample_size={task.subsample_size} must lie in [0, train_size={task.train_size}]",
                          _line_of(task_items, "subsample_size"))
    if not geometry.tied_head and task.kind in ("parity", "majority") and geometry.classes != 2:
        raise ConfigError(f"{task.kind} needs classes = 2", _line_of(model_items, "classes"))

    run_items = sections.get("run", {})
    run = {}
    for key, (raw, line) in run_items.items():
        if key not in RUN_KEYS:
            raise ConfigError(f"unknown key {key!r} in [run]", line)
        run[key] = _convert(raw, RUN_KEYS[key], key, line)
    cfg = RunConfig(model=geometry, adapter=adapter, optim=optim, task=task, **run)
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}", _line_of(run_items, "mode"))
    if cfg.dtype not in DTYPES:
        raise ConfigError(f"dtype must be one of {DTYPES}", _line_of(run_items, "dtype"))
    if cfg.seed < 0 or cfg.trial < 0:
        raise ConfigError("seed and trial must be >= 0", _line_of(run_items, "seed", "trial"))
    return cfg


def serialize_config(cfg):
    sections = {"model": dataclasses.asdict(cfg.model)}
    sections["adapter"] = dataclasses.asdict(cfg.adapter) if cfg.adapter else {"kind": "none"}
    sections["optim"] = dataclasses.asdict(cfg.optim)
    sections["task"] = dataclasses.asdict(cfg.task)
    sections["run"] = {"seed": cfg.seed, "trial": cfg.trial, "mode": cfg.mode, "dtype": cfg.dtype}
    return write_sections(sections)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
