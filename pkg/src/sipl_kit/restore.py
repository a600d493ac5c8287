"""Full restoration model and the iterative self-refining inference loop.

``RestorationModel`` couples the encoder-decoder backbone with one of three
bottleneck behaviours fixed at construction: no privilege at all (baseline),
scalar blending of privileged features (training-only guidance), or proxy
fusion through the learnable privileged dictionary.

``infer_iterative`` implements the three-step test-time algorithm: restore
once from the degraded input alone, then repeatedly feed the previous output
back as a pseudo-privileged image. No gradient crosses iterations; each step
is a plain forward pass on detached images.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import BackboneConfig, RestorationBackbone
from .errors import MissingGroundTruth, ShapeError
from .privfusion import FUSION_MODES, PI_MODES, ProxyFusion, blend_pl, bypass
from .substrate import torch_generator


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """H x W x C float image in [0,1] -> (1, C, H, W) float32 tensor."""
    if img.ndim != 3:
        raise ShapeError(f"expected HxWxC image, got shape {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))[None]).float()


def to_image(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) or (C, H, W) tensor -> H x W x C float32 array."""
    if t.ndim == 4:
        t = t[0]
    return t.detach().cpu().numpy().transpose(1, 2, 0)


class RestorationModel(torch.nn.Module):
    """Backbone plus the bottleneck privilege mechanism chosen at construction."""

    def __init__(self, cfg: BackboneConfig, fusion_mode: str = "none",
                 n_dict_entries: int = 64, n_heads: int = 1, init_seed: int = 0):
        super().__init__()
        if fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        self.cfg = cfg
        self.fusion_mode = fusion_mode
        self.n_dict_entries = n_dict_entries
        self.n_heads = n_heads
        self.init_seed = init_seed
        g = torch_generator(init_seed, "init")
        self.backbone = RestorationBackbone(cfg, generator=g)
        self.fusion = None
        if fusion_mode == "proxy":
            self.fusion = ProxyFusion(n_dict_entries, cfg.bottleneck_channels,
                                      n_heads=n_heads, generator=g)

    def build_config(self) -> dict:
        """Everything needed to reconstruct this model before loading weights."""
        return {
            "backbone": {
                "base_channels": self.cfg.base_channels,
                "n_scales": self.cfg.n_scales,
                "blocks_per_scale": self.cfg.blocks_per_scale,
                "img_channels": self.cfg.img_channels,
            },
            "fusion_mode": self.fusion_mode,
            "n_dict_entries": self.n_dict_entries,
            "n_heads": self.n_heads,
        }

    @classmethod
    def from_build_config(cls, bc: dict) -> "RestorationModel":
        return cls(BackboneConfig(**bc["backbone"]), bc["fusion_mode"],
                   bc["n_dict_entries"], bc.get("n_heads", 1))

    def forward_batch(self, i_d: torch.Tensor, i_pi: torch.Tensor | None = None,
                      alpha: float | None = None) -> torch.Tensor:
        """Batched forward; output is unclipped (clipping is evaluation-side).

        With no privileged batch the bottleneck passes through unchanged. In
        blend mode an explicit alpha is required, and alpha == 0 skips the
        privileged encoder pass entirely so the step is bit-identical to a
        baseline forward.
        """
        f_d, skips = self.backbone.encode(i_d)
        if i_pi is None:
            tokens = bypass(f_d.tokens)
        elif self.fusion_mode == "blend":
            if alpha is None:
                raise ValueError("blend mode needs an explicit alpha")
            if alpha == 0.0:
                tokens = bypass(f_d.tokens)
            else:
                f_pi, _ = self.backbone.encode(i_pi)
                tokens = blend_pl(f_d.tokens, f_pi.tokens, alpha)
        elif self.fusion_mode == "proxy":
            f_pi, _ = self.backbone.encode(i_pi)
            tokens = self.fusion(f_d.tokens, f_pi.tokens)
        else:
            raise ValueError("this model has no privileged pathway; omit i_pi")
        return self.backbone.decode(f_d.with_tokens(tokens), skips, i_d)

    def forward(self, i_d, i_pi=None, alpha=None):
        return self.forward_batch(i_d, i_pi, alpha)


def forward(model: RestorationModel, i_d: np.ndarray,
            i_pi: np.ndarray | None = None, clip: bool = True) -> np.ndarray:
    """Single-image restoration; images are H x W x C floats in [0,1]."""
    with torch.no_grad():
        out = model.forward_batch(to_tensor(i_d),
                                  None if i_pi is None else to_tensor(i_pi))
    img = to_image(out)
    return np.clip(img, 0.0, 1.0) if clip else img


@dataclass
class InferenceConfig:
    t_max: int = 1
    pi_mode: str = "self"
    clip_each_iter: bool = True
    iter0_self_pi: bool = False  # feed I_d as its own pseudo-PI in the first pass

    def __post_init__(self):
        if self.t_max < 0:
            raise ValueError("t_max must be non-negative")
        if self.pi_mode not in PI_MODES:
            raise ValueError(f"pi_mode must be one of {PI_MODES}")


@dataclass
class RestorationTrace:
    outputs: list = field(default_factory=list)  # [I0, I1, ..., I_tmax]
    per_iter_psnr: list | None = None

    def __len__(self):
        return len(self.outputs)

    @property
    def final(self) -> np.ndarray:
        return self.outputs[-1]

    def save(self, out_dir: str, prefix: str = "I") -> list:
        """Dump the trace as I0.png ... It.png plus a metrics sidecar."""
        from .degrade import save_png  # local import avoids a cycle
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for t, img in enumerate(self.outputs):
            path = os.path.join(out_dir, f"{prefix}{t}.png")
            save_png(np.clip(img, 0.0, 1.0), path)
            paths.append(path)
        sidecar = os.path.join(out_dir, "trace_metrics.jsonl")
        with open(sidecar, "w", encoding="utf-8") as fh:
            for t, path in enumerate(paths):
                rec = {"iteration": t, "path": os.path.basename(path)}
                if self.per_iter_psnr is not None:
                    rec["psnr"] = self.per_iter_psnr[t]
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return paths


def infer_iterative(model: RestorationModel, i_d: np.ndarray, cfg: InferenceConfig,
                    i_gt: np.ndarray | None = None) -> RestorationTrace:
    """Iterative self-refinement: outputs feed back as pseudo-privileged images.

    The first pass uses only the degraded input (unless ``iter0_self_pi``),
    then each step t reuses I^(t-1) (pi_mode "self"), the ground truth every
    step ("gt", the upper-bound probe), or nothing ("none", the control whose
    trace is constant). Trace length is always t_max + 1.
    """
    if cfg.pi_mode == "gt" and cfg.t_max > 0 and i_gt is None:
        raise MissingGroundTruth("pi_mode=gt requires a ground-truth image")

    def run(i_pi):
        out = forward(model, i_d, i_pi, clip=False)
        return np.clip(out, 0.0, 1.0) if cfg.clip_each_iter else out

    can_fuse = model.fusion_mode == "proxy"
    outputs = [run(i_d if (cfg.iter0_self_pi and can_fuse) else None)]
    for _ in range(cfg.t_max):
        if cfg.pi_mode == "self" and can_fuse:
            pi = outputs[-1]
        elif cfg.pi_mode == "gt" and can_fuse:
            pi = i_gt
        else:
            pi = None
        outputs.append(run(pi))

    trace = RestorationTrace(outputs=outputs)
    if i_gt is not None:
        from .evalkit import psnr
        trace.per_iter_psnr = [psnr(np.clip(o, 0.0, 1.0), i_gt) for o in outputs]
    return trace
