"""Metrics, parameter/FLOPs accounting, and report rendering.

PSNR and SSIM operate on float images in [0,1] with peak 1.0; no 8-bit
quantization happens inside the metrics. FLOPs are analytic, derived from the
model configuration rather than traced, under an explicit convention:

  * 1 multiply-add = 2 FLOPs
  * conv (k x k, Cin -> Cout, output H' x W'): 2 * H' * W' * Cout * Cin * k^2
  * transposed conv: 2 * H_in * W_in * Cin * Cout * k^2
  * matmul (m x k) @ (k x n): 2 * m * k * n
  * softmax: 5 FLOPs per element
  * bias adds, activations, residual adds, clipping: excluded

The convention string is embedded in every cost report so numbers stay
auditable.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .backbone import BackboneConfig
from .errors import ImageTooSmall, ShapeMismatch

FLOPS_CONVENTION = ("mac=2; conv=2*H'*W'*Cout*Cin*k^2; tconv=2*Hin*Win*Cin*Cout*k^2; "
                    "matmul=2*m*k*n; softmax=5/elem; bias/activations/residuals excluded")

PSNR_CAP_DB = 100.0


# ---------------------------------------------------------------------------
# metrics

def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); zero error returns the 100 dB sentinel."""
    _check_pair(a, b)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB))


def _ssim_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_K = _ssim_window()


def _ssim_channel(a: np.ndarray, b: np.ndarray, c1: float, c2: float) -> float:
    win = _SSIM_K
    mu_a = convolve2d(a, win, mode="valid")
    mu_b = convolve2d(b, win, mode="valid")
    ea2 = convolve2d(a * a, win, mode="valid")
    eb2 = convolve2d(b * b, win, mode="valid")
    eab = convolve2d(a * b, win, mode="valid")
    var_a = ea2 - mu_a * mu_a
    var_b = eb2 - mu_b * mu_b
    cov = eab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         peak: float = 1.0) -> float:
    """Structural similarity, 11x11 Gaussian window (sigma 1.5), mean over
    valid window positions, averaged across channels."""
    _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    if min(h, w) < 11:
        raise ImageTooSmall(f"ssim needs at least 11x11 pixels, got {h}x{w}")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    vals = [_ssim_channel(af[..., c], bf[..., c], c1, c2) for c in range(a.shape[2])]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# parameter accounting

def param_breakdown(model) -> dict:
    """Learnable scalar counts split by subsystem."""
    backbone = sum(p.numel() for p in model.backbone.parameters() if p.requires_grad)
    fusion = 0
    if getattr(model, "fusion", None) is not None:
        fusion = sum(p.numel() for p in model.fusion.parameters() if p.requires_grad)
    return {"backbone": backbone, "privfusion": fusion, "total": backbone + fusion}


def count_params(model) -> int:
    return param_breakdown(model)["total"]


# ---------------------------------------------------------------------------
# FLOPs accounting

def _conv_flops(h_out, w_out, c_in, c_out, k):
    return 2 * h_out * w_out * c_out * c_in * k * k


def _backbone_flops(cfg: BackboneConfig, h: int, w: int) -> dict:
    ch = [cfg.channels_at(s) for s in range(cfg.n_scales)]
    res = [(h // (2 ** s), w // (2 ** s)) for s in range(cfg.n_scales)]
    enc = _conv_flops(h, w, cfg.img_channels, ch[0], 3)  # stem
    for s in range(cfg.n_scales):
        hs, ws = res[s]
        enc += cfg.blocks_per_scale * 2 * _conv_flops(hs, ws, ch[s], ch[s], 3)
        if s + 1 < cfg.n_scales:
            hn, wn = res[s + 1]
            enc += _conv_flops(hn, wn, ch[s], ch[s + 1], 3)
    dec = 0
    for s in reversed(range(cfg.n_scales - 1)):
        hs, ws = res[s + 1]
        dec += 2 * hs * ws * ch[s + 1] * ch[s] * 4  # transposed 2x2
        hn, wn = res[s]
        dec += cfg.blocks_per_scale * 2 * _conv_flops(hn, wn, ch[s], ch[s], 3)
    dec += _conv_flops(h, w, ch[0], cfg.img_channels, 3)  # head
    return {"encoder": enc, "decoder": dec}


def _fusion_flops(n_entries: int, channels: int, n_tokens: int) -> int:
    n, c, length = n_entries, channels, n_tokens
    mm = lambda m, k, kk: 2 * m * k * kk
    stage1 = mm(n, c, c) + 2 * mm(length, c, c)       # q, k, v projections
    stage1 += mm(n, c, length) + 5 * n * length + mm(n, length, c)
    stage2 = mm(length, c, c) + 2 * mm(n, c, c)       # q from F_d, k/v from priors
    stage2 += mm(length, c, n) + 5 * length * n + mm(length, n, c)
    stage2 += mm(length, c, c)                        # output projection
    return stage1 + stage2


def count_flops(model, input_hw: tuple, pi_enabled: bool) -> int:
    """Analytic forward-pass FLOPs for one image at the given resolution.

    The PI-enabled pass adds a second full encoder run (the privileged image)
    plus both cross-attention stages; the decoder runs once either way.
    """
    h, w = input_hw
    cfg = model.cfg
    parts = _backbone_flops(cfg, h, w)
    total = parts["encoder"] + parts["decoder"]
    if pi_enabled:
        if model.fusion is None:
            raise ValueError("model has no privileged pathway; pi_enabled invalid")
        f = cfg.downsample_factor
        n_tokens = (h // f) * (w // f)
        total += parts["encoder"]
        total += _fusion_flops(model.n_dict_entries, cfg.bottleneck_channels, n_tokens)
    return total


@dataclass
class CostReport:
    params: int
    params_by_part: dict
    flops_forward_nopi: int
    flops_forward_pi: int
    input_hw: tuple
    convention: str = FLOPS_CONVENTION

    def flops_iterative(self, t: int) -> int:
        """Initial no-PI pass plus t privileged refinement passes."""
        if t < 0:
            raise ValueError("iteration count must be non-negative")
        return self.flops_forward_nopi + t * self.flops_forward_pi

    @property
    def single_pass_overhead(self) -> float:
        return (self.flops_forward_pi - self.flops_forward_nopi) / self.flops_forward_nopi

    def to_record(self) -> dict:
        return {
            "params": self.params,
            "params_by_part": dict(self.params_by_part),
            "flops_forward_nopi": self.flops_forward_nopi,
            "flops_forward_pi": self.flops_forward_pi,
            "single_pass_overhead": self.single_pass_overhead,
            "input_hw": list(self.input_hw),
            "convention": self.convention,
        }


def cost_report(model, input_hw: tuple) -> CostReport:
    parts = param_breakdown(model)
    nopi = count_flops(model, input_hw, pi_enabled=False)
    pi = count_flops(model, input_hw, pi_enabled=True) if model.fusion is not None else nopi
    return CostReport(params=parts["total"], params_by_part=parts,
                      flops_forward_nopi=nopi, flops_forward_pi=pi, input_hw=input_hw)


# ---------------------------------------------------------------------------
# metric aggregation over a corpus

@dataclass
class MetricsReport:
    label: str
    iteration: int
    per_task: dict = field(default_factory=dict)  # name -> {psnr_mean, ssim_mean, n}

    @property
    def overall(self) -> dict:
        n = sum(v["n"] for v in self.per_task.values())
        if n == 0:
            return {"psnr_mean": 0.0, "ssim_mean": 0.0, "n": 0}
        return {
            "psnr_mean": sum(v["psnr_mean"] * v["n"] for v in self.per_task.values()) / n,
            "ssim_mean": sum(v["ssim_mean"] * v["n"] for v in self.per_task.values()) / n,
            "n": n,
        }

    def to_record(self) -> dict:
        return {"label": self.label, "iteration": self.iteration,
                "per_task": self.per_task, "overall": self.overall}


def aggregate_metrics(label: str, iteration: int, samples: list) -> MetricsReport:
    """samples: list of (task_name, psnr, ssim) triples."""
    acc = {}
    for task, p, s in samples:
        acc.setdefault(task, []).append((p, s))
    report = MetricsReport(label=label, iteration=iteration)
    for task, vals in acc.items():
        report.per_task[task] = {
            "psnr_mean": float(np.mean([v[0] for v in vals])),
            "ssim_mean": float(np.mean([v[1] for v in vals])),
            "n": len(vals),
        }
    return report


def degraded_input_metrics(manifest, split: str, label: str = "degraded") -> MetricsReport:
    """Metrics of the raw degraded inputs against ground truth (the floor)."""
    samples = [(manifest.task_names[pair.task_id], psnr(pair.degraded, pair.clean),
                ssim(pair.degraded, pair.clean))
               for pair in manifest.iter_pairs(split)]
    return aggregate_metrics(label, 0, samples)


def evaluate_iterative(model, manifest, split: str, t_max: int, pi_mode: str = "self",
                       label: str = "", iter0_self_pi: bool = False) -> list:
    """Run the refinement loop on every pair; one MetricsReport per iteration."""
    from .restore import InferenceConfig, infer_iterative
    cfg = InferenceConfig(t_max=t_max, pi_mode=pi_mode, iter0_self_pi=iter0_self_pi)
    per_iter = [[] for _ in range(t_max + 1)]
    for pair in manifest.iter_pairs(split):
        task = manifest.task_names[pair.task_id]
        trace = infer_iterative(model, pair.degraded, cfg, i_gt=pair.clean)
        for t, out in enumerate(trace.outputs):
            out = np.clip(out, 0.0, 1.0)
            per_iter[t].append((task, psnr(out, pair.clean), ssim(out, pair.clean)))
    return [aggregate_metrics(label, t, rows) for t, rows in enumerate(per_iter)]


# ---------------------------------------------------------------------------
# report rendering

def write_metrics_jsonl(reports: list, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")


def render_table(reports: list) -> str:
    """Plain-text comparison table: one row per report, task columns + overall."""
    tasks = []
    for r in reports:
        for t in r.per_task:
            if t not in tasks:
                tasks.append(t)
    headers = ["label", "iter"] + [f"{t} PSNR/SSIM" for t in tasks] + ["overall PSNR/SSIM"]
    rows = []
    for r in reports:
        row = [r.label, str(r.iteration)]
        for t in tasks:
            cell = r.per_task.get(t)
            row.append("-" if cell is None else
                       f"{cell['psnr_mean']:.2f}/{cell['ssim_mean']:.4f}")
        o = r.overall
        row.append(f"{o['psnr_mean']:.2f}/{o['ssim_mean']:.4f}")
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths))
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def write_csv(reports: list, path: str) -> None:
    tasks = []
    for r in reports:
        for t in r.per_task:
            if t not in tasks:
                tasks.append(t)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = ["label", "iteration"]
        for t in tasks:
            header += [f"{t}_psnr", f"{t}_ssim", f"{t}_n"]
        header += ["overall_psnr", "overall_ssim", "overall_n"]
        writer.writerow(header)
        for r in reports:
            row = [r.label, r.iteration]
            for t in tasks:
                cell = r.per_task.get(t, {"psnr_mean": "", "ssim_mean": "", "n": ""})
                row += [cell["psnr_mean"], cell["ssim_mean"], cell["n"]]
            o = r.overall
            row += [o["psnr_mean"], o["ssim_mean"], o["n"]]
            writer.writerow(row)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "sipl-kit"  # deterministic element ids
    import matplotlib.pyplot as plt
    return plt


def _savefig(fig, path: str) -> None:
    # SVG output drops the creation date so regenerated reports stay identical.
    if path.endswith(".svg"):
        fig.savefig(path, metadata={"Date": None})
    else:
        fig.savefig(path)


def plot_psnr_vs_iteration(series: dict, path: str, title: str = "PSNR vs iteration") -> None:
    """series: label -> list of (iteration, psnr)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, pts in series.items():
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel("refinement iteration")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)


def plot_training_curves(curves: dict, path: str, title: str = "validation PSNR") -> None:
    """curves: label -> list of (epoch, val_psnr)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, pts in curves.items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("val PSNR (dB)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)


def render_cost_table(reports: dict) -> str:
    """reports: label -> CostReport; includes the convention line."""
    buf = io.StringIO()
    buf.write(f"# convention: {FLOPS_CONVENTION}\n")
    headers = ["label", "params", "flops_nopi", "flops_pi", "overhead", "iter2_flops"]
    rows = []
    for label, r in reports.items():
        rows.append([label, f"{r.params:,}", f"{r.flops_forward_nopi:,}",
                     f"{r.flops_forward_pi:,}", f"{100*r.single_pass_overhead:.1f}%",
                     f"{r.flops_iterative(2):,}"])
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths))
    buf.write(fmt(headers) + "\n")
    buf.write(fmt(["-" * w for w in widths]) + "\n")
    for r in rows:
        buf.write(fmt(r) + "\n")
    return buf.getvalue()
