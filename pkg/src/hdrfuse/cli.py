"""Command-line pipeline: gen -> synth -> analyze -> train -> adapt/tta -> eval -> merge.

Configuration is one JSON document with per-stage sections; unknown keys are
rejected and the effective config is snapshotted alongside every output so
runs are self-describing. All randomness derives from the top-level seed.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric-contract
violation.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import adapter as adapter_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import quality as quality_mod
from . import tta as tta_mod
from .adapter import model_from_checkpoint
from .bracket import BracketConfig, export_bracket, load_bracket, synth_bracket
from .errors import ConfigError, DataError, HdrfuseError, NumericContractError
from .imageio import normalize_frames
from .model import Checkpoint
from .rng import substream
from .scene import (
    SceneSpec,
    SceneSequence,
    ShakeSpec,
    SpriteSpec,
    export_sequence,
    generate_sequence,
    load_manifest,
    load_sequence,
    write_manifest,
)

DEFAULT_CONFIG = {
    "seed": 0,
    "paths": {},
    "scene": {
        "resolution": [128, 128],
        "num_frames": 24,
        "counts": {"A": 4},
        "domains": {
            "A": {
                "backgrounds": ["gradient-sky", "sun-disk", "night-lights"],
                "lighting": [0.8, 1.2],
                "sprites": [1, 3],
                "speed": [1, 3],
                "shake_prob": 0.3,
                "radiance": [0.5, 2.0],
                "integer_motion": True,
            }
        },
    },
    "bracket": {
        "ev_offsets": [-2.0, 0.0, 2.0],
        "ev_choices": None,
        "crf_gamma": 2.2,
        "bit_depth": 16,
        "sigma_low": [0.0001, 0.001],
        "sigma_mid": [0.00001, 0.0001],
        "frame_stride": 1,
        "per_domain": {},
    },
    "model": {
        "base_channels": 16,
        "depth": 4,
        "epochs": 30,
        "lr": 1e-3,
        "crop": 32,
        "augment": True,
        "calibration_samples": 8,
    },
    "adapter": {
        "r_s": 1,
        "r_t": 64,
        "use_share": True,
        "use_transfer": True,
        "learn_alpha": True,
        "epochs": 30,
        "lr": 1e-3,
        "crop": 32,
        "augment": True,
    },
    "tta": {
        "lam": 0.999,
        "lr": 1e-4,
        "use_ts": True,
        "use_adapter": True,
        "use_unc": True,
        "predict_from": "teacher",
        "view_noise": 1e-3,
        "exposure_offsets": [-0.1, -0.5, 0.0, 0.5, 1.0],
        "flips": True,
        "wb_gain_range": [0.9, 1.1],
        "noise_sigma": 1e-4,
        "uncertainty_scale": None,
        "r_s": 1,
        "r_t": 64,
    },
    "eval": {"mu": 5000.0},
}

_WILDCARD_SECTIONS = {("scene", "domains"), ("scene", "counts"), ("bracket", "per_domain")}


def _check_keys(cfg: dict, defaults: dict, path: tuple = ()) -> None:
    for key, value in cfg.items():
        if path in _WILDCARD_SECTIONS:
            template = next(iter(defaults.values())) if defaults else None
            if isinstance(value, dict) and isinstance(template, dict):
                _check_keys(value, template, path + ("*",))
            continue
        if key not in defaults:
            raise ConfigError(f"unknown config key {'.'.join(path + (key,))!r}")
        if isinstance(value, dict) and isinstance(defaults[key], dict):
            _check_keys(value, defaults[key], path + (key,))


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, seed_override=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
        _check_keys(user, DEFAULT_CONFIG)
        cfg = _merge(cfg, user)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    return cfg


def _snapshot(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2))


def _jobs(args) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    return max(1, int(os.environ.get("S2R_JOBS", "1")))


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------

def sample_scene_spec(domain_cfg: dict, resolution, num_frames: int, seed: int) -> SceneSpec:
    rng = substream(seed, "scene-spec")
    w, h = resolution
    background = str(rng.choice(domain_cfg["backgrounds"]))
    lighting = float(rng.uniform(*domain_cfg["lighting"]))
    lo_n, hi_n = domain_cfg["sprites"]
    n_sprites = int(rng.integers(lo_n, hi_n + 1))
    lo_s, hi_s = domain_cfg["speed"]
    integer_motion = bool(domain_cfg.get("integer_motion", True))
    sprites = []
    for _ in range(n_sprites):
        shape = str(rng.choice(["disk", "box"]))
        size = float(rng.uniform(0.10, 0.22) * min(w, h))
        rad_lo, rad_hi = domain_cfg["radiance"]
        radiance = tuple(float(v) for v in rng.uniform(rad_lo, rad_hi) * rng.uniform(0.4, 1.0, 3))
        speeds = []
        for _axis in range(2):
            mag = rng.uniform(lo_s, hi_s)
            if integer_motion:
                mag = float(max(1, round(mag)))
            speeds.append(float(mag * rng.choice([-1.0, 1.0])))
        if rng.random() < 0.3:
            speeds[int(rng.integers(0, 2))] = 0.0
        sprites.append(
            SpriteSpec(shape=shape, size=size, radiance=radiance, velocity=tuple(speeds))
        )
    shake = None
    if rng.random() < float(domain_cfg.get("shake_prob", 0.0)):
        shake = ShakeSpec()
    return SceneSpec(
        resolution=(int(w), int(h)),
        num_frames=int(num_frames),
        background=background,
        dynamic_elements=sprites,
        lighting_scale=lighting,
        shake=shake,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def _gen_one(task) -> dict:
    out_dir, domain, spec_doc = task
    spec = SceneSpec.from_dict(spec_doc)
    seq = generate_sequence(spec)
    export_sequence(seq, out_dir)
    return {"path": str(out_dir), "domain": domain}


def cmd_gen(args) -> dict:
    cfg = load_config(args.config, args.seed)
    scene_cfg = cfg["scene"]
    out = Path(args.out)
    _snapshot(cfg, out)
    tasks = []
    index = 0
    for domain, count in sorted(scene_cfg["counts"].items()):
        domain_cfg = scene_cfg["domains"].get(domain)
        if domain_cfg is None:
            raise ConfigError(f"scene.counts names unknown domain {domain!r}")
        merged_domain = _merge(next(iter(DEFAULT_CONFIG["scene"]["domains"].values())), domain_cfg)
        for _ in range(int(count)):
            spec_seed = int(substream(cfg["seed"], "gen", index).integers(0, 2**31 - 1))
            spec = sample_scene_spec(
                merged_domain, scene_cfg["resolution"], scene_cfg["num_frames"], spec_seed
            )
            tasks.append((out / "sequences" / f"seq_{index:04d}", domain, spec.to_dict()))
            index += 1
    jobs = _jobs(args)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            items = list(pool.map(_gen_one, tasks))
    else:
        items = [_gen_one(t) for t in tasks]
    write_manifest(out / "manifest.json", items, kind="sequences")
    return {"sequences": len(items), "manifest": str(out / "manifest.json")}


# ---------------------------------------------------------------------------
# Bracket synthesis
# ---------------------------------------------------------------------------

def _bracket_config_for(cfg: dict, domain: str, seed: int) -> BracketConfig:
    bracket_cfg = {k: v for k, v in cfg["bracket"].items() if k != "per_domain"}
    override = cfg["bracket"].get("per_domain", {}).get(domain, {})
    for key, value in override.items():
        if key not in bracket_cfg:
            raise ConfigError(f"unknown bracket override key {key!r} for domain {domain!r}")
        bracket_cfg[key] = value
    for key in ("ev_offsets", "sigma_low", "sigma_mid"):
        bracket_cfg[key] = tuple(bracket_cfg[key])
    if bracket_cfg.get("ev_choices"):
        bracket_cfg["ev_choices"] = tuple(tuple(c) for c in bracket_cfg["ev_choices"])
    return BracketConfig(**bracket_cfg, seed=seed)


def _synth_one(task) -> dict:
    seq_path, domain, out_dir, cfg_doc, seed = task
    seq = load_sequence(seq_path)
    frames, _ = normalize_frames(seq.frames)
    normalized = SceneSequence(
        frames=frames, flow=seq.flow, occlusion=seq.occlusion,
        reference_index=seq.reference_index, spec=seq.spec,
    )
    bracket_cfg = _bracket_config_for(cfg_doc, domain, seed)
    bracket = synth_bracket(normalized, bracket_cfg)
    export_bracket(bracket, out_dir)
    return {"path": str(out_dir), "domain": domain}


def cmd_synth(args) -> dict:
    cfg = load_config(args.config, args.seed)
    items = load_manifest(args.manifest, kind="sequences")
    out = Path(args.out)
    _snapshot(cfg, out)
    tasks = []
    for index, item in enumerate(items):
        seed = int(substream(cfg["seed"], "synth", index).integers(0, 2**31 - 1))
        name = Path(item["path"]).name
        tasks.append(
            (item["path"], item.get("domain", "all"), out / "brackets" / name, cfg, seed)
        )
    jobs = _jobs(args)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out_items = list(pool.map(_synth_one, tasks))
    else:
        out_items = [_synth_one(t) for t in tasks]
    write_manifest(out / "manifest.json", out_items, kind="brackets")
    return {"brackets": len(out_items), "manifest": str(out / "manifest.json")}


# ---------------------------------------------------------------------------
# Analysis / training / adaptation
# ---------------------------------------------------------------------------

def cmd_analyze(args) -> dict:
    out = Path(args.out)
    report = metrics_mod.analyze(args.manifest, out_dir=out)
    return {
        "images": report.size,
        "means": {k: getattr(report.means, k) for k in type(report.means).FIELDS},
        "report": str(out / "report.json"),
    }


def _calibrate(net, items, cfg) -> float:
    n = int(cfg["model"]["calibration_samples"])
    if n <= 0:
        return tta_mod.DEFAULT_UNCERTAINTY_SCALE
    brackets = [load_bracket(it["path"]) for it in items[:n]]
    augspec = tta_mod.AugmentationSpec(
        exposure_offsets=tuple(cfg["tta"]["exposure_offsets"]),
        flips=cfg["tta"]["flips"],
        wb_gain_range=tuple(cfg["tta"]["wb_gain_range"]),
        noise_sigma=cfg["tta"]["noise_sigma"],
        seed=cfg["seed"],
    )
    return tta_mod.calibrate_uncertainty(net.infer, brackets, augspec, mu=cfg["eval"]["mu"])


def cmd_train(args) -> dict:
    cfg = load_config(args.config, args.seed)
    items = load_manifest(args.manifest, kind="brackets")
    model_cfg = cfg["model"]
    trainer = model_mod.FusionTrainer(
        base_channels=model_cfg["base_channels"], depth=model_cfg["depth"],
        epochs=args.epochs if args.epochs is not None else model_cfg["epochs"],
        lr=model_cfg["lr"], crop=model_cfg["crop"], augment=model_cfg["augment"],
        mu=cfg["eval"]["mu"], seed=cfg["seed"],
    )
    trainer.fit(items)
    domains = sorted({it.get("domain", "all") for it in items})
    scale = _calibrate(trainer.net_, items, cfg)
    ckpt = trainer.to_checkpoint(
        {"source_domains": domains, "uncertainty_scale": scale, "history": trainer.history_}
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    _snapshot(cfg, out.parent)
    return {
        "checkpoint": str(out),
        "epochs": trainer.epochs,
        "final_loss": trainer.history_[-1] if trainer.history_ else None,
        "uncertainty_scale": scale,
    }


def cmd_finetune(args) -> dict:
    cfg = load_config(args.config, args.seed)
    items = load_manifest(args.manifest, kind="brackets")
    ckpt = Checkpoint.load(args.checkpoint)
    model_cfg = cfg["model"]
    out_ckpt = model_mod.finetune(
        ckpt, items,
        epochs=args.epochs if args.epochs is not None else model_cfg["epochs"],
        lr=model_cfg["lr"], crop=model_cfg["crop"], augment=model_cfg["augment"],
        mu=cfg["eval"]["mu"], seed=cfg["seed"],
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out_ckpt.save(out)
    _snapshot(cfg, out.parent)
    history = out_ckpt.metadata["finetune"]["history"]
    return {"checkpoint": str(out), "final_loss": history[-1] if history else None}


def cmd_adapt(args) -> dict:
    cfg = load_config(args.config, args.seed)
    items = load_manifest(args.manifest, kind="brackets")
    ckpt = Checkpoint.load(args.checkpoint)
    a = cfg["adapter"]
    out_ckpt = adapter_mod.adapt_supervised(
        ckpt, items,
        epochs=args.epochs if args.epochs is not None else a["epochs"],
        lr=a["lr"], r_s=a["r_s"], r_t=a["r_t"], use_share=a["use_share"],
        use_transfer=a["use_transfer"], learn_alpha=a["learn_alpha"],
        crop=a["crop"], augment=a["augment"], mu=cfg["eval"]["mu"], seed=cfg["seed"],
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out_ckpt.save(out)
    _snapshot(cfg, out.parent)
    history = out_ckpt.metadata["history"]
    return {"checkpoint": str(out), "final_loss": history[-1] if history else None}


def cmd_tta(args) -> dict:
    cfg = load_config(args.config, args.seed)
    ckpt = Checkpoint.load(args.checkpoint)
    t = cfg["tta"]
    engine = tta_mod.TtaEngine(
        lam=t["lam"], lr=t["lr"], use_ts=t["use_ts"], use_adapter=t["use_adapter"],
        use_unc=t["use_unc"], predict_from=t["predict_from"], view_noise=t["view_noise"],
        r_s=t["r_s"], r_t=t["r_t"], exposure_offsets=tuple(t["exposure_offsets"]),
        flips=t["flips"], wb_gain_range=tuple(t["wb_gain_range"]),
        noise_sigma=t["noise_sigma"], uncertainty_scale=t["uncertainty_scale"],
        mu=cfg["eval"]["mu"], seed=cfg["seed"],
    )
    engine.start(ckpt)
    out = Path(args.out)
    _snapshot(cfg, out)
    report, diagnostics = engine.run_stream(args.manifest, out_dir=out)
    summary = {"samples": len(diagnostics), "out": str(out)}
    if report is not None:
        quality_mod.write_eval_report(report, out)
        summary["psnr_mu"] = report.psnr_mu
        summary["psnr_l"] = report.psnr_l
    return summary


def cmd_eval(args) -> dict:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    report = quality_mod.evaluate(args.pred, args.manifest, out_dir=out, mu=cfg["eval"]["mu"])
    return {
        "pairs": len(report.per_sample),
        "psnr_mu": report.psnr_mu,
        "psnr_l": report.psnr_l,
        "ssim_mu": report.ssim_mu,
        "ssim_l": report.ssim_l,
        "report": str(out / "eval.json"),
    }


def cmd_merge(args) -> dict:
    ckpt = Checkpoint.load(args.checkpoint)
    net = model_from_checkpoint(ckpt)
    if getattr(net, "adapter_plan", None) is None:
        raise DataError("checkpoint carries no adapters to merge")
    merged = adapter_mod.merge_model(net)
    rng = substream(0, "merge-verify")
    worst = 0.0
    for _ in range(4):
        stack = rng.standard_normal((net.config.in_channels, 16, 16)).astype(np.float32)
        worst = max(worst, float(np.abs(net.infer(stack) - merged.infer(stack)).max()))
    if worst >= 1e-5:
        raise NumericContractError(
            f"merge equivalence violated: max deviation {worst:.3e} >= 1e-5"
        )
    meta = dict(ckpt.metadata)
    meta.pop("adapter_plan", None)
    meta["merged_from"] = str(args.checkpoint)
    out_ckpt = model_mod.base_checkpoint(merged, meta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out_ckpt.save(out)
    return {"checkpoint": str(out), "max_deviation": worst}


# ---------------------------------------------------------------------------
# Ablation grids
# ---------------------------------------------------------------------------

ADAPTER_GRID = {
    "fine-tune": {},
    "share-only": {"use_share": True, "use_transfer": False, "learn_alpha": False},
    "transfer-only": {"use_share": False, "use_transfer": True, "learn_alpha": False},
    "both": {"use_share": True, "use_transfer": True, "learn_alpha": False},
    "both+learned-alpha": {"use_share": True, "use_transfer": True, "learn_alpha": True},
}

TTA_GRID = {
    "frozen": {"use_ts": False, "use_adapter": False, "use_unc": False},
    "ts": {"use_ts": True, "use_adapter": False, "use_unc": False},
    "ts+adapter": {"use_ts": True, "use_adapter": True, "use_unc": False},
    "ts+adapter+unc": {"use_ts": True, "use_adapter": True, "use_unc": True},
}


def _eval_checkpoint(ckpt: Checkpoint, items, mu: float) -> dict:
    net = model_from_checkpoint(ckpt)
    pairs = []
    for item in items:
        bracket = load_bracket(item["path"])
        if bracket.gt is None:
            raise DataError(f"{item['path']}: evaluation requires ground truth")
        pairs.append((net.predict(bracket), bracket.gt))
    report = quality_mod.evaluate_pairs(pairs, mu=mu)
    return {
        "psnr_mu": report.psnr_mu, "psnr_l": report.psnr_l,
        "ssim_mu": report.ssim_mu, "ssim_l": report.ssim_l,
    }


def run_adapter_ablation(ckpt: Checkpoint, train_items, test_items, cfg: dict,
                         rows=None, epochs=None) -> list[dict]:
    rows = rows or list(ADAPTER_GRID)
    a = cfg["adapter"]
    mu = cfg["eval"]["mu"]
    results = []
    for row in rows:
        if row not in ADAPTER_GRID:
            raise ConfigError(f"unknown adapter ablation row {row!r}")
        n_epochs = epochs if epochs is not None else a["epochs"]
        if row == "fine-tune":
            out_ckpt = model_mod.finetune(
                ckpt, train_items, epochs=n_epochs, lr=cfg["model"]["lr"],
                crop=cfg["model"]["crop"], augment=cfg["model"]["augment"],
                mu=mu, seed=cfg["seed"],
            )
        else:
            flags = ADAPTER_GRID[row]
            out_ckpt = adapter_mod.adapt_supervised(
                ckpt, train_items, epochs=n_epochs, lr=a["lr"], r_s=a["r_s"],
                r_t=a["r_t"], crop=a["crop"], augment=a["augment"], mu=mu,
                seed=cfg["seed"], **flags,
            )
        scores = _eval_checkpoint(out_ckpt, test_items, mu)
        results.append({"row": row, **scores})
    return results


def run_tta_ablation(ckpt: Checkpoint, stream_items, cfg: dict, rows=None) -> list[dict]:
    rows = rows or list(TTA_GRID)
    t = cfg["tta"]
    results = []
    for row in rows:
        if row not in TTA_GRID:
            raise ConfigError(f"unknown tta ablation row {row!r}")
        flags = TTA_GRID[row]
        engine = tta_mod.TtaEngine(
            lam=t["lam"], lr=t["lr"], predict_from=t["predict_from"],
            view_noise=t["view_noise"], r_s=t["r_s"], r_t=t["r_t"],
            exposure_offsets=tuple(t["exposure_offsets"]), flips=t["flips"],
            wb_gain_range=tuple(t["wb_gain_range"]), noise_sigma=t["noise_sigma"],
            uncertainty_scale=t["uncertainty_scale"], mu=cfg["eval"]["mu"],
            seed=cfg["seed"], **flags,
        )
        engine.start(ckpt)
        report, _ = engine.run_stream(stream_items)
        if report is None:
            raise DataError("tta ablation requires ground-truth brackets")
        results.append({
            "row": row, "psnr_mu": report.psnr_mu, "psnr_l": report.psnr_l,
            "ssim_mu": report.ssim_mu, "ssim_l": report.ssim_l,
        })
    return results


def _write_table(rows: list[dict], out_dir: Path, name: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.json").write_text(json.dumps(rows, indent=2))
    import csv

    with open(out_dir / f"{name}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "PSNR-mu", "PSNR-l", "SSIM-mu", "SSIM-l"])
        for r in rows:
            writer.writerow([
                r["row"], f"{r['psnr_mu']:.4f}", f"{r['psnr_l']:.4f}",
                f"{r['ssim_mu']:.6f}", f"{r['ssim_l']:.6f}",
            ])


def cmd_ablate(args) -> dict:
    cfg = load_config(args.config, args.seed)
    ckpt = Checkpoint.load(args.checkpoint)
    out = Path(args.out)
    _snapshot(cfg, out)
    rows = args.rows.split(",") if args.rows else None
    if args.grid == "adapter":
        if args.train_manifest is None:
            raise ConfigError("adapter ablation requires --train-manifest")
        train_items = load_manifest(args.train_manifest, kind="brackets")
        test_items = load_manifest(args.manifest, kind="brackets")
        table = run_adapter_ablation(ckpt, train_items, test_items, cfg, rows=rows,
                                     epochs=args.epochs)
    else:
        stream_items = load_manifest(args.manifest, kind="brackets")
        table = run_tta_ablation(ckpt, stream_items, cfg, rows=rows)
    _write_table(table, out, f"ablation_{args.grid}")
    return {"rows": [r["row"] for r in table], "table": str(out / f"ablation_{args.grid}.json")}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hdrfuse",
        description="Synthetic HDR fusion pipeline with sim-to-real adapters",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True, config=True, out=True):
        if config:
            p.add_argument("--config", default=None, help="JSON run configuration")
        if manifest:
            p.add_argument("--manifest", required=True, help="input manifest")
        if out:
            p.add_argument("--out", required=True, help="output path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--jobs", type=int, default=None,
                       help="parallel workers (default: env S2R_JOBS or 1)")

    p = sub.add_parser("gen", help="generate procedural HDR sequences")
    common(p, manifest=False)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("synth", help="synthesize exposure brackets")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze", help="dataset diversity report")
    common(p, config=False)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="pretrain the fusion network")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="full fine-tuning on a target domain")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("adapt", help="supervised adapter adaptation")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("tta", help="label-free single-pass test-time adaptation")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_tta)

    p = sub.add_parser("eval", help="PSNR/SSIM evaluation of stored predictions")
    common(p)
    p.add_argument("--pred", required=True, help="directory of <sample>.pfm predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("merge", help="fold adapters into base weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("ablate", help="run an ablation grid")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", choices=["adapter", "tta"], required=True)
    p.add_argument("--rows", default=None, help="comma-separated subset of grid rows")
    p.add_argument("--train-manifest", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except NumericContractError as exc:
        print(json.dumps({"error": "numeric-contract", "message": str(exc)}), file=sys.stderr)
        return 4
    except (DataError, HdrfuseError) as exc:
        print(json.dumps({"error": "data", "message": str(exc)}), file=sys.stderr)
        return 3
    print(json.dumps({"command": args.command, "ok": True, **summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
