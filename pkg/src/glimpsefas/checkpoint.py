"""Checkpoint archives: named tensors plus the model config as YAML text."""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

import torch
import yaml

from .model import GlimpseNet, ModelConfig, Stage1Net
from .policy import PatchScorer

FORMAT = "glimpsefas-checkpoint/1"


class LoadError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    state_dict: dict[str, torch.Tensor]
    model_config: ModelConfig
    stage: str  # "stage1", "stage2" or "one_stage"
    meta: dict = field(default_factory=dict)
    rng_state: torch.Tensor | None = None
    scorer_state: dict[str, torch.Tensor] | None = None

    @classmethod
    def from_model(cls, model, stage: str, meta: dict | None = None) -> "Checkpoint":
        meta = dict(meta or {})
        scorer = None
        if isinstance(model, GlimpseNet):
            meta.setdefault("ablation", model.ablation)
            meta.setdefault("selector", model.selector)
            if model.scorer is not None:
                scorer = {k: v.detach().clone() for k, v in model.scorer.state_dict().items()}
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(state, model.cfg, stage, meta, torch.get_rng_state(), scorer)

    def build(self):
        """Materialise the network this checkpoint describes."""
        if self.stage == "stage1":
            model = Stage1Net(self.model_config)
        else:
            model = GlimpseNet(
                self.model_config,
                ablation=self.meta.get("ablation", "full"),
                selector=self.meta.get("selector", "drl"),
            )
            if self.scorer_state is not None:
                cfg = self.model_config
                model.scorer = PatchScorer(cfg.feature_channels, cfg.patch_size)
                model.scorer.load_state_dict(self.scorer_state)
        load_strict(model, self.state_dict)
        model.eval()
        return model


def load_strict(model: torch.nn.Module, state: dict[str, torch.Tensor], prefix: str = "") -> None:
    own = model.state_dict()
    bad = sorted(
        k for k in set(own) | set(state)
        if k not in own or k not in state or own[k].shape != state[k].shape
    )
    if bad:
        raise LoadError(f"checkpoint tensors incompatible with model: {', '.join(prefix + k for k in bad)}")
    model.load_state_dict(state)


def config_from_dict(d: dict) -> ModelConfig:
    names = {f.name for f in fields(ModelConfig)}
    unknown = set(d) - names
    if unknown:
        raise LoadError(f"unknown model-config keys {sorted(unknown)}")
    return ModelConfig(**d)


def save(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "model_config": yaml.safe_dump(ckpt.model_config.to_dict(), sort_keys=True),
        "stage": ckpt.stage,
        "meta": ckpt.meta,
        "state_dict": ckpt.state_dict,
        "rng_state": ckpt.rng_state,
        "scorer_state": ckpt.scorer_state,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load(path: str | Path) -> Checkpoint:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises a zoo of types on corrupt archives
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise LoadError(f"{path} is not a {FORMAT} archive")
    cfg = config_from_dict(yaml.safe_load(payload["model_config"]))
    return Checkpoint(
        payload["state_dict"], cfg, payload["stage"], payload.get("meta") or {},
        payload.get("rng_state"), payload.get("scorer_state"),
    )


def tensor_hash(module_or_state, prefix: str = "") -> str:
    """SHA-256 over names and raw bytes of every tensor (parameters and buffers)."""
    state = module_or_state.state_dict() if isinstance(module_or_state, torch.nn.Module) else module_or_state
    h = hashlib.sha256()
    for k in sorted(state):
        if not k.startswith(prefix):
            continue
        t = state[k].detach().contiguous().cpu()
        h.update(k.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
