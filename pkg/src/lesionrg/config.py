"""Run configuration and the key-value config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


@dataclass
class TrainConfig:
    # optimisation
    epochs: int = 100
    batch_size: int = 4
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple[int, ...] = (60, 80)
    lr_decay_factor: float = 0.1
    grad_clip: float = 5.0
    seed: int = 0
    # similarity temperature shared by the visual and semantic classifiers
    tau: float = 10.0
    image_size: int = 128
    # ablation toggles
    use_lesion_features: bool = True
    use_imprinting: bool = True
    use_multiview: bool = True
    use_soft_label: bool = True
    embedding_source: str = "attribute-derived"
    # detector
    channels: tuple[int, ...] = (16, 32, 64, 64)
    blocks_per_stage: int = 1
    feature_dim: int = 128
    roi_size: int = 7
    roi_hidden: int = 256
    anchor_size: float = 0.1875  # fraction of image size
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 64
    train_proposals: int = 32
    test_proposals: int = 16
    proposal_nms: float = 0.7
    roi_pos_iou: float = 0.5
    roi_positives: int = 16
    objectness_threshold: float = 0.5
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    crop_size: int = 64
    # few-shot adaptation
    finetune_steps: int = 100
    finetune_lr: float = 1e-3
    # generator
    layers: int = 2
    heads: int = 4
    width: int = 128
    ff_width: int = 256
    dropout: float = 0.1
    max_len: int = 60
    # probability of blanking the visual half of a case's multi-view
    # conditioning during training (0 disables; only with use_multiview)
    view_dropout: float = 0.0
    decode_mode: str = "greedy"
    beam_width: int = 3
    # model selection on validation-novel CIDEr; 0 disables
    val_interval: int = 0
    save_interval: int = 0

    def __post_init__(self):
        for name in ("epochs", "lr_decay_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("batch_size", "lr", "tau", "image_size", "feature_dim", "width", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs and any(e >= self.epochs for e in self.lr_decay_epochs):
            raise ValueError("lr decay epochs must be < epochs")
        if not 0.0 <= self.view_dropout < 1.0:
            raise ValueError("view_dropout must lie in [0, 1)")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.decode_mode not in ("greedy", "beam"):
            raise ValueError("decode_mode must be greedy or beam")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment; tuples are comma separated."""
    base = base or TrainConfig()
    defaults = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _coerce(value, defaults[key])
        except ValueError as e:
            raise ValueError(f"config line {lineno}: {e}") from e
    return base.replace(**updates)


def load_config(path: str | None, **overrides) -> TrainConfig:
    cfg = TrainConfig()
    if path:
        with open(path) as fh:
            cfg = parse_config_text(fh.read(), cfg)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**overrides) if overrides else cfg


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
