"""Run configuration and the flat ``key = value`` config file format."""
import dataclasses
import json
from dataclasses import dataclass, fields

from .encoder import EncoderConfig
from .errors import ConfigError
from .predictor import PREDICTORS, SupportSpec
from .synthvid import DegradationSpec

INJECTIONS = ("none", "shallow", "deep")


@dataclass
class RunConfig:
    # encoder
    patch: int = 8
    depth: int = 2
    width: int = 32
    heads: int = 2
    ffn_hidden: int = 64
    pos_embed: bool = True
    ln_eps: float = 1e-5
    # prompting
    predictor: str = "transformer"
    injection: str = "shallow"
    S: int = 8
    K: int = 7
    NP: int = 7
    # optimisation
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 300
    batch: int = 16
    eval_every: int = 100
    seed: int = 0
    # data: read from `data` when set, otherwise generated from the keys below
    data: str = ""
    eval_data: str = ""
    eval_split: float = 0.2
    clips: int = 200
    frames: int = 8
    size: str = "32x32"
    classes: int = 4
    data_seed: int = 0
    blur_len: int = 7
    occl_frac: float = 1.0
    degrade_prob: float = 0.5
    # output
    out: str = ""
    log_wallclock: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.predictor not in PREDICTORS:
            raise ConfigError(f"predictor must be one of {PREDICTORS}, got {self.predictor!r}")
        if self.injection not in INJECTIONS:
            raise ConfigError(f"injection must be one of {INJECTIONS}, got {self.injection!r}")
        for key in ("S", "K", "depth", "width", "heads", "patch", "batch", "eval_every", "classes", "frames"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key in ("NP", "steps", "clips"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        if not 0.0 <= self.eval_split < 1.0:
            raise ConfigError("eval_split must lie in [0, 1)")
        self.image_size  # parses size

    @property
    def image_size(self):
        try:
            h, w = (int(v) for v in self.size.lower().split("x"))
        except ValueError:
            raise ConfigError(f"size must look like HxW, got {self.size!r}") from None
        return h, w

    @property
    def prompted(self):
        return self.injection != "none" and self.NP > 0

    def encoder_config(self, image_size=None):
        return EncoderConfig(image_size=tuple(image_size or self.image_size),
                             patch_size=(self.patch, self.patch), depth=self.depth,
                             width=self.width, heads=self.heads, ffn_hidden=self.ffn_hidden,
                             ln_eps=self.ln_eps, pos_embed=self.pos_embed)

    def support_spec(self):
        return SupportSpec(self.S, self.K)

    def degradation_spec(self):
        return DegradationSpec(blur_len=self.blur_len, occluder_fraction=self.occl_frac,
                               degrade_prob=self.degrade_prob)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def coerce(key, raw):
    """Convert a raw string (or JSON scalar) to the field's type."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = type(_FIELDS[key].default)
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw)
        if kind is float:
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None
    return str(raw)


def parse_config_text(text):
    """Parse ``key = value`` lines (``#`` comments) or a JSON object into a dict."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(stripped)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON config: {e}") from None
        return {k: coerce(k, v) for k, v in doc.items()}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, raw)
    return out


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        out[key] = coerce(key, raw)
    return out


def load_config(path=None, overrides=()):
    values = {}
    if path:
        with open(path, encoding="utf-8") as f:
            values.update(parse_config_text(f.read()))
    values.update(parse_overrides(overrides))
    return RunConfig(**values)
