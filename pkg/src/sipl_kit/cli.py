"""Command-line entry point.

One executable, six subcommands: gen-data, train, eval, infer, ablate,
report. Behaviour is driven by a layered config: built-in defaults, then an
optional YAML file (--config), then individual flags. Unknown config keys are
a hard error, and the resolved effective config is echoed verbatim into every
output directory so results stay auditable.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
The env var SIPL_KIT_THREADS caps internal parallelism (default 1).
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import yaml

from .errors import (ConfigError, DataError, MissingGroundTruth, NonFiniteGradient,
                     NonFiniteLoss, SiplKitError, SpecNotHeldOut, UnknownKind)
from .substrate import apply_thread_cap

DEFAULT_CONFIG = {
    "corpus": {
        "tasks": "desk",
        "n_per_task": 125,
        "img_size": 64,
        "split_seed": 0,
        "split_fracs": [0.8, 0.1, 0.1],
    },
    "train": {
        "regime": "sipl",
        "epochs": 30,
        "batch_size": 8,
        "lr": 2e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "lr_min": 1e-6,
        "alpha0": 0.9,
        "alpha_decay": "linear",
        "alpha_end_fraction": 0.8,
        "p_nopi": 0.3,
        "p_selfpi": 0.0,
        "selfpi_warmup": 0.8,
        "fusion_lr_mult": 1.0,
        "seed": 0,
        "base_channels": 16,
        "n_scales": 3,
        "blocks_per_scale": 2,
        "n_dict_entries": 64,
        "n_heads": 1,
    },
    "inference": {
        "iters": 1,
        "pi_mode": "self",
        "clip_each_iter": True,
        "iter0_self_pi": False,
    },
}


def _check_keys(given: dict, allowed: dict, path: str = "") -> None:
    for key, value in given.items():
        here = f"{path}{key}"
        if key not in allowed:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(allowed[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} must be a mapping")
            _check_keys(value, allowed[key], here + ".")


def load_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            loaded = yaml.safe_load(fh) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    if not isinstance(loaded, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    _check_keys(loaded, DEFAULT_CONFIG)
    for section, values in loaded.items():
        cfg[section].update(values)
    return cfg


def echo_config(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


# flag dest -> (section, key); applied only when the flag was given
_OVERRIDES = {
    "tasks": ("corpus", "tasks"),
    "n": ("corpus", "n_per_task"),
    "size": ("corpus", "img_size"),
    "split_seed": ("corpus", "split_seed"),
    "regime": ("train", "regime"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "lr_min": ("train", "lr_min"),
    "alpha0": ("train", "alpha0"),
    "alpha_decay": ("train", "alpha_decay"),
    "alpha_end_fraction": ("train", "alpha_end_fraction"),
    "p_nopi": ("train", "p_nopi"),
    "p_selfpi": ("train", "p_selfpi"),
    "selfpi_warmup": ("train", "selfpi_warmup"),
    "fusion_lr_mult": ("train", "fusion_lr_mult"),
    "seed": ("train", "seed"),
    "base_channels": ("train", "base_channels"),
    "n_scales": ("train", "n_scales"),
    "blocks_per_scale": ("train", "blocks_per_scale"),
    "n_dict_entries": ("train", "n_dict_entries"),
    "n_heads": ("train", "n_heads"),
    "iters": ("inference", "iters"),
    "pi_mode": ("inference", "pi_mode"),
    "iter0_self_pi": ("inference", "iter0_self_pi"),
}


def resolve_config(args) -> dict:
    cfg = load_config(getattr(args, "config", None))
    for dest, (section, key) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[section][key] = value
    return cfg


def train_config_from(cfg: dict):
    from .privfusion import AlphaSchedule
    from .train import TrainConfig
    t = cfg["train"]
    schedule = AlphaSchedule(alpha0=t["alpha0"], decay=t["alpha_decay"],
                             end_fraction=t["alpha_end_fraction"])
    return TrainConfig(
        regime=t["regime"], epochs=t["epochs"], batch_size=t["batch_size"],
        lr=t["lr"], beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"],
        lr_min=t["lr_min"], alpha_schedule=schedule, p_nopi=t["p_nopi"],
        p_selfpi=t["p_selfpi"], selfpi_warmup=t["selfpi_warmup"],
        fusion_lr_mult=t["fusion_lr_mult"], seed=t["seed"],
        base_channels=t["base_channels"], n_scales=t["n_scales"],
        blocks_per_scale=t["blocks_per_scale"], n_dict_entries=t["n_dict_entries"],
        n_heads=t["n_heads"])


def resolve_tasks(spec: str) -> list:
    from .degrade import TEMPLATE_SETS, cdd11_templates, desk_templates, ood_template
    if spec in TEMPLATE_SETS:
        return TEMPLATE_SETS[spec]()
    registry = {t.name: t for t in cdd11_templates() + desk_templates() + [ood_template()]}
    tasks = []
    for name in spec.split(","):
        name = name.strip()
        if name not in registry:
            raise ConfigError(f"unknown task {name!r}; known: "
                              f"{sorted(registry)} or a set name in "
                              f"{sorted(TEMPLATE_SETS)}")
        tasks.append(registry[name])
    return tasks


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    from .degrade import build_corpus
    cfg = resolve_config(args)
    c = cfg["corpus"]
    tasks = resolve_tasks(c["tasks"])
    manifest = build_corpus(args.out, tasks, c["n_per_task"], c["split_seed"],
                            img_hw=(c["img_size"], c["img_size"]),
                            split_fracs=tuple(c["split_fracs"]))
    echo_config(cfg, args.out)
    print(f"manifest: {os.path.join(args.out, 'manifest.jsonl')}")
    print(f"pairs: {len(manifest.records)}")
    print(f"corpus_hash: {manifest.corpus_hash()}")
    return 0


def cmd_train(args) -> int:
    from .degrade import CorpusManifest
    from .train import fit, read_log
    cfg = resolve_config(args)
    manifest = CorpusManifest.load(args.data)
    tcfg = train_config_from(cfg)
    echo_config(cfg, args.out)
    fit(tcfg, manifest, args.out)
    log = read_log(args.out)
    vals = [r["val_psnr"]["mean"] for r in log if "val_psnr" in r]
    print(f"checkpoints: {os.path.join(args.out, 'best.ckpt')} "
          f"{os.path.join(args.out, 'final.ckpt')}")
    if vals:
        print(f"val_psnr_final: {vals[-1]:.3f} dB  val_psnr_best: {max(vals):.3f} dB")
    return 0


def cmd_eval(args) -> int:
    from .degrade import CorpusManifest
    from .evalkit import evaluate_iterative, render_table, write_csv, write_metrics_jsonl
    cfg = resolve_config(args)
    manifest = CorpusManifest.load(args.data)
    inf = cfg["inference"]
    if args.ckpt:
        from .checkpoint import Checkpoint
        model = Checkpoint.load(args.ckpt).build_model()
    else:
        from .train import build_model
        model = build_model(train_config_from(cfg))
    pi_mode = inf["pi_mode"] if model.fusion is not None else "none"
    reports = evaluate_iterative(model, manifest, args.split, t_max=inf["iters"],
                                 pi_mode=pi_mode, label=args.label,
                                 iter0_self_pi=inf["iter0_self_pi"])
    print(render_table(reports), end="")
    if args.out:
        echo_config(cfg, args.out)
        write_metrics_jsonl(reports, os.path.join(args.out, "metrics.jsonl"))
        write_csv(reports, os.path.join(args.out, "metrics.csv"))
        with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8") as fh:
            fh.write(render_table(reports))
    return 0


def cmd_infer(args) -> int:
    from .checkpoint import Checkpoint
    from .degrade import load_png
    from .restore import InferenceConfig, infer_iterative
    cfg = resolve_config(args)
    inf = cfg["inference"]
    model = Checkpoint.load(args.ckpt).build_model()
    i_d = load_png(args.input)
    i_gt = load_png(args.gt) if args.gt else None
    icfg = InferenceConfig(t_max=inf["iters"], pi_mode=inf["pi_mode"],
                           clip_each_iter=inf["clip_each_iter"],
                           iter0_self_pi=inf["iter0_self_pi"])
    trace = infer_iterative(model, i_d, icfg, i_gt=i_gt)
    echo_config(cfg, args.out)
    paths = trace.save(args.out)
    print(f"trace: {len(paths)} images in {args.out}")
    if trace.per_iter_psnr is not None:
        for t, val in enumerate(trace.per_iter_psnr):
            print(f"iter {t}: psnr {val:.3f} dB")
    return 0


def cmd_ablate(args) -> int:
    from .degrade import CorpusManifest, ood_template
    from .harness import fig8_plan, run_ablation, run_ood_study, train_dir_for
    from .checkpoint import Checkpoint
    cfg = resolve_config(args)
    manifest = CorpusManifest.load(args.data)
    if args.plan != "fig8":
        raise ConfigError(f"unknown plan {args.plan!r}; available: fig8")
    if "," in args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        seeds = list(range(int(args.seeds)))  # "--seeds 3" means seeds 0,1,2
    tcfg = train_config_from(cfg)
    plan = fig8_plan(seeds=seeds, train=tcfg)
    echo_config(cfg, args.out)
    report = run_ablation(plan, manifest, args.out, reuse=not args.retrain)
    print(report.rung_table(), end="")
    for name, check in report.checks.items():
        print(f"check {name}: {'PASS' if check['ok'] else 'FAIL'} ({check['detail']})")
    if args.with_ood:
        template = ood_template()
        for seed in seeds:
            best = os.path.join(train_dir_for(args.out, "sipl", seed), "best.ckpt")
            ood = run_ood_study(Checkpoint.load(best), manifest,
                                template.spec(seed=0), t_max=args.ood_iters)
            ood.save(os.path.join(args.out, f"ood-s{seed}"))
            print(f"ood seed {seed}: " +
                  " ".join(f"I{t}={p:.3f}" for t, p in enumerate(ood.psnr_per_iter)))
    if report.failures:
        for f in report.failures:
            print(f"training failure: {f}", file=sys.stderr)
        return 4 if any("loss is not finite" in f["error"] for f in report.failures) else 3
    return 0


def cmd_report(args) -> int:
    from .harness import AblationReport
    src = args.src
    out = args.out or src
    os.makedirs(out, exist_ok=True)
    found = False
    ablation_path = os.path.join(src, "report.json")
    if os.path.exists(ablation_path):
        with open(ablation_path, encoding="utf-8") as fh:
            rec = json.load(fh)
        AblationReport(**rec).save(out)
        print(f"ablation report rendered to {out}")
        found = True
    if args.cost_ckpt:
        from .checkpoint import Checkpoint
        from .evalkit import cost_report, render_cost_table
        model = Checkpoint.load(args.cost_ckpt).build_model()
        table = render_cost_table({"model": cost_report(model, (args.hw, args.hw))})
        print(table, end="")
        with open(os.path.join(out, "cost.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
        found = True
    if not found:
        raise DataError(f"nothing to report: no report.json under {src} "
                        "and no --cost-ckpt given")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_config_flags(p, keys):
    d = DEFAULT_CONFIG
    helps = {
        "tasks": f"task set or comma list (default {d['corpus']['tasks']})",
        "n": f"pairs per task (default {d['corpus']['n_per_task']})",
        "size": f"square image size (default {d['corpus']['img_size']})",
        "split_seed": f"corpus seed (default {d['corpus']['split_seed']})",
        "regime": f"baseline|pl|sipl (default {d['train']['regime']})",
        "epochs": f"training epochs (default {d['train']['epochs']})",
        "batch_size": f"batch size (default {d['train']['batch_size']})",
        "lr": f"Adam learning rate (default {d['train']['lr']})",
        "lr_min": f"cosine floor (default {d['train']['lr_min']})",
        "alpha0": f"initial blend coefficient (default {d['train']['alpha0']})",
        "alpha_decay": f"linear|cosine (default {d['train']['alpha_decay']})",
        "alpha_end_fraction": f"fraction of epochs to reach 0 "
                              f"(default {d['train']['alpha_end_fraction']})",
        "p_nopi": f"bypass-step probability (default {d['train']['p_nopi']})",
        "p_selfpi": f"self-PI-step probability (default {d['train']['p_selfpi']})",
        "selfpi_warmup": f"epoch fraction before self-PI steps "
                         f"(default {d['train']['selfpi_warmup']})",
        "fusion_lr_mult": f"lr multiplier for the fusion block "
                          f"(default {d['train']['fusion_lr_mult']})",
        "seed": f"root seed (default {d['train']['seed']})",
        "base_channels": f"backbone width (default {d['train']['base_channels']})",
        "n_scales": f"encoder scales (default {d['train']['n_scales']})",
        "blocks_per_scale": f"residual blocks per scale "
                            f"(default {d['train']['blocks_per_scale']})",
        "n_dict_entries": f"dictionary rows (default {d['train']['n_dict_entries']})",
        "n_heads": f"attention heads (default {d['train']['n_heads']})",
        "iters": f"refinement iterations (default {d['inference']['iters']})",
        "pi_mode": f"none|self|gt (default {d['inference']['pi_mode']})",
    }
    types = {
        "tasks": str, "n": int, "size": int, "split_seed": int, "regime": str,
        "epochs": int, "batch_size": int, "lr": float, "lr_min": float,
        "alpha0": float, "alpha_decay": str, "alpha_end_fraction": float,
        "p_nopi": float, "p_selfpi": float, "selfpi_warmup": float,
        "fusion_lr_mult": float, "seed": int,
        "base_channels": int, "n_scales": int, "blocks_per_scale": int,
        "n_dict_entries": int, "n_heads": int, "iters": int, "pi_mode": str,
    }
    for key in keys:
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, type=types[key], default=None, help=helps[key])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sipl-kit",
        description="privilege-guided all-in-one image restoration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic degradation corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--config", default=None, help="YAML config file")
    _add_config_flags(p, ["tasks", "n", "size", "split_seed"])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one regime on a corpus")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="run directory for checkpoints/logs")
    p.add_argument("--config", default=None, help="YAML config file")
    _add_config_flags(p, ["regime", "epochs", "batch_size", "lr", "lr_min",
                          "alpha0", "alpha_decay", "alpha_end_fraction",
                          "p_nopi", "p_selfpi", "selfpi_warmup",
                          "fusion_lr_mult", "seed", "base_channels",
                          "n_scales", "blocks_per_scale", "n_dict_entries",
                          "n_heads"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or a fresh model) on a split")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--ckpt", default=None, help="checkpoint path (fresh model if omitted)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"],
                   help="corpus split (default test)")
    p.add_argument("--out", default=None, help="optional report directory")
    p.add_argument("--label", default="eval", help="report label (default eval)")
    p.add_argument("--config", default=None, help="YAML config file")
    _add_config_flags(p, ["iters", "pi_mode", "base_channels", "n_scales",
                          "blocks_per_scale", "n_dict_entries", "n_heads", "regime"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run iterative restoration on one image")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--input", required=True, help="degraded input PNG")
    p.add_argument("--gt", default=None, help="optional ground-truth PNG")
    p.add_argument("--out", required=True, help="trace output directory")
    p.add_argument("--config", default=None, help="YAML config file")
    _add_config_flags(p, ["iters", "pi_mode"])
    p.add_argument("--iter0-self-pi", dest="iter0_self_pi", action="store_const",
                   const=True, default=None,
                   help="feed the degraded input as its own PI on the first pass")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="run the component-ablation ladder")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="ablation output directory")
    p.add_argument("--plan", default="fig8", help="plan name (default fig8)")
    p.add_argument("--seeds", default="0,1,2",
                   help="comma list of seeds, or a count N for 0..N-1 (default 0,1,2)")
    p.add_argument("--retrain", action="store_true",
                   help="retrain even if checkpoints exist")
    p.add_argument("--with-ood", action="store_true",
                   help="also run the unseen-composite iteration study")
    p.add_argument("--ood-iters", type=int, default=2,
                   help="OOD refinement iterations (default 2)")
    p.add_argument("--config", default=None, help="YAML config file")
    _add_config_flags(p, ["epochs", "batch_size", "lr", "p_nopi", "p_selfpi",
                          "selfpi_warmup", "fusion_lr_mult", "alpha0",
                          "alpha_decay", "alpha_end_fraction", "base_channels",
                          "n_scales", "blocks_per_scale", "n_dict_entries",
                          "n_heads"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="re-render tables/plots from stored results")
    p.add_argument("--src", required=True, help="directory holding report.json etc.")
    p.add_argument("--out", default=None, help="output directory (default: --src)")
    p.add_argument("--cost-ckpt", default=None,
                   help="also emit a params/FLOPs table for this checkpoint")
    p.add_argument("--hw", type=int, default=64,
                   help="input size for FLOPs accounting (default 64)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UnknownKind, MissingGroundTruth, ValueError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (NonFiniteLoss, NonFiniteGradient) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (DataError, SpecNotHeldOut, FileNotFoundError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except SiplKitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
