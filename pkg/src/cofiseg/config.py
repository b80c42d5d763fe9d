"""Run configuration: a flat, validated ``key: value`` text schema.

Files contain one ``key: value`` pair per line; ``#`` starts a comment and
blank lines are skipped.  Keys match the RunConfig field names below; every
key is optional (defaults apply) and unknown keys are rejected.  Tuples are
written space-separated, booleans as true/false.  The canonical rendering
(sorted keys, one per line) feeds the SHA-256 config fingerprint stored in
checkpoints.
"""

import hashlib
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .model import ModelConfig
from .unet import BackboneConfig
from .vit import VitConfig


@dataclass
class RunConfig:
    # run
    seed: int = 0
    variant: str = "dec"              # enc | dec | both
    n_classes: int = 2
    volume_dims: tuple = (32, 32, 32)
    in_channels: int = 1
    # optimization
    batch_size: int = 2
    base_lr: float = 2e-3
    lr_power: float = 0.9
    max_iters: int = 2000
    momentum: float = 0.99
    nesterov: bool = True
    clip_norm: float = 12.0
    checkpoint_every: int = 500
    eval_every: int = 0               # 0 disables in-training evaluation
    stop_dice_vol: float = 0.0        # early-stop bars; 0 disables
    stop_dice_lesion: float = 0.0
    # backbone
    levels: int = 3
    widths: tuple = (16, 32, 64, 128)
    activation: str = "gelu"
    norm: str = "instance"
    upsample: str = "resize"
    # transformer encoder
    vit_layers: int = 4
    vit_dim: int = 96
    vit_heads: int = 4
    vit_patch: int = 1
    vit_mlp_ratio: float = 4.0
    # query decoder
    n_queries: int = 20
    refine_iters: int = 2
    d_q: int = 0
    bias_gain: float = 1.0
    threshold: float = 0.5
    tie_projections: bool = False
    bias_source: str = "binary"
    attention_scale: bool = False
    feature_level: int = 1
    # loss
    lam0: float = 0.7
    lam1: float = 0.3
    dice_eps: float = 1.0
    no_object_weight: float = 0.1
    deep_supervision: bool = True
    # augmentation probabilities (0 disables a transform)
    aug_flip: float = 0.3
    aug_rot90: float = 0.3
    aug_scale: float = 0.2
    aug_noise: float = 0.15
    aug_blur: float = 0.1
    aug_jitter: float = 0.15
    aug_lowres: float = 0.1
    aug_gamma: float = 0.15

    def validate(self):
        if self.batch_size < 1 or self.max_iters < 1:
            raise ConfigError("batch_size and max_iters must be positive")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not (0 <= self.momentum < 1):
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        for name in ("aug_flip", "aug_rot90", "aug_scale", "aug_noise", "aug_blur",
                     "aug_jitter", "aug_lowres", "aug_gamma"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.lam0 < 0 or self.lam1 < 0:
            raise ConfigError("loss weights must be non-negative")
        self.model_config().validate()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant,
            n_classes=self.n_classes,
            volume_dims=tuple(self.volume_dims),
            backbone=BackboneConfig(
                in_channels=self.in_channels, levels=self.levels,
                widths=tuple(self.widths), activation=self.activation,
                norm=self.norm, upsample=self.upsample),
            vit=VitConfig(
                d_enc=self.vit_dim, n_layers=self.vit_layers,
                n_heads=self.vit_heads, patch=self.vit_patch,
                mlp_ratio=self.vit_mlp_ratio),
            n_queries=self.n_queries,
            refine_iters=self.refine_iters,
            d_q=self.d_q,
            bias_gain=self.bias_gain,
            threshold=self.threshold,
            tie_projections=self.tie_projections,
            bias_source=self.bias_source,
            attention_scale=self.attention_scale,
            feature_level=self.feature_level,
        )

    def augment_config(self):
        from .augment import AugmentConfig
        return AugmentConfig(
            p_flip=self.aug_flip, p_rot90=self.aug_rot90, p_scale=self.aug_scale,
            p_noise=self.aug_noise, p_blur=self.aug_blur, p_jitter=self.aug_jitter,
            p_lowres=self.aug_lowres, p_gamma=self.aug_gamma)


def _render_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return " ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def render_config(cfg: RunConfig) -> str:
    """Canonical text form: sorted ``key: value`` lines."""
    items = asdict(cfg)
    return "".join(f"{k}: {_render_value(items[k])}\n" for k in sorted(items))


def fingerprint(cfg: RunConfig) -> str:
    return hashlib.sha256(render_config(cfg).encode("utf-8")).hexdigest()


def _parse_value(text, default):
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = text.replace(",", " ").split()
        kind = type(default[0]) if default else int
        return tuple(kind(p) for p in parts)
    return text


def parse_config(text, base=None) -> RunConfig:
    """Parse ``key: value`` lines into a RunConfig; unknown keys are rejected."""
    cfg = base or RunConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, value = (part.strip() for part in line.split(":", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        seen.add(key)
        try:
            setattr(cfg, key, _parse_value(value, known[key]))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path, base=None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), base=base)


def diff_configs(a_text: str, b_text: str):
    """Differing keys between two canonical config renderings."""
    parse = lambda t: dict(line.split(": ", 1) for line in t.splitlines() if line)
    da, db = parse(a_text), parse(b_text)
    out = []
    for key in sorted(set(da) | set(db)):
        va, vb = da.get(key, "<absent>"), db.get(key, "<absent>")
        if va != vb:
            out.append((key, va, vb))
    return out
