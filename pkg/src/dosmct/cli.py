"""Command-line interface: simulate, reconstruct, train-score, ablate.

Every run writes exactly one ``manifest.json`` (resolved-config hash, seed,
code version, inputs/outputs, wall-clock timings) so it can be replayed
exactly. Precedence when resolving settings: config file > flags > defaults.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .arrayio import read_array, write_array, write_csv, write_pgm
from .classical import FistaConfig, fbp, fista_tv, sirt_reconstruct
from .dosm import DosmConfig, reconstruct as dosm_reconstruct
from .grids import (
    FanBeamGeometry,
    ImageGrid,
    Sinogram,
    Image,
    geometry_from_json,
    geometry_hash,
    geometry_to_json,
    grid_from_json,
    grid_to_json,
)
from .metrics import evaluate
from .phantoms import (
    NoiseSpec,
    PhantomSpec,
    make_phantom,
    random_ellipse_images,
    simulate_measurement,
    subsample_views,
)
from .score import (
    ConvDenoiser,
    DenoiserScore,
    NoiseSchedule,
    TrainConfig,
    dsm_train,
    load_checkpoint,
    save_checkpoint,
)

DEFAULT_CONFIG = {
    "seed": 0,
    "views": 23,
    "grid": {"nx": 64, "ny": 64, "pixel_size": 1.0, "center_offset": [0.0, 0.0]},
    "geometry": {
        "mode": "fan",
        "detector_shape": "arc",
        "source_to_center": 1500.0,
        "center_to_detector": 500.0,
        "n_detectors": 720,
        "detector_width_total": 413.0,
        "n_views": 720,
    },
    "phantom": {"kind": "shepp_logan", "parameters": []},
    "noise": {"sigma": 0.0},
    "paths": {},
    "sirt": {"n_iters": 200},
    "fista": {"lam": 0.02, "n_iters": 150, "step": "auto"},
    "dosm": {
        "n_channels": 5,
        "dc_inner_iters": 20,
        "beta": 0.1,
        "n_steps": 200,
        "sigma_min": 0.01,
        "sigma_max": 50.0,
        "corrector_snr": 0.16,
        "n_corrector_steps": 1,
        "coupling_mode": "prox",
    },
    "train": {
        "dataset": "ellipses",
        "n_images": 2000,
        "dataset_seed": 101,
        "blob_fraction": 0.3,
        "hidden_channels": 16,
        "data_scale": 1.0,
        "model_seed": 0,
        "learning_rate": 2e-4,
        "batch_size": 8,
        "epochs": 30,
        "steps_per_epoch": 100,
    },
}


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit code 2."""


def _deep_merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in overlay.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "views", None) is not None:
        cfg["views"] = args.views
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        cfg = _deep_merge(cfg, user)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _set_thread_cap() -> int | None:
    raw = os.environ.get("DOSMCT_THREADS")
    if not raw:
        return None
    try:
        n = max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"DOSMCT_THREADS must be an integer, got {raw!r}") from exc
    import numba

    numba.set_num_threads(min(n, os.cpu_count() or 1))
    return n


def build_geometry(cfg: dict) -> FanBeamGeometry:
    g = cfg["geometry"]
    n_views = int(g["n_views"])
    span = 2.0 * np.pi if g["mode"] == "fan" else np.pi
    angles = tuple((span * k / n_views) % (2.0 * np.pi) for k in range(n_views))
    return FanBeamGeometry(
        source_to_center=float(g["source_to_center"]),
        center_to_detector=float(g["center_to_detector"]),
        n_detectors=int(g["n_detectors"]),
        detector_width_total=float(g["detector_width_total"]),
        view_angles=angles,
        mode=g["mode"],
        detector_shape=g.get("detector_shape", "arc"),
    )


def build_phantom(cfg: dict) -> Image:
    grid = grid_from_json(cfg["grid"])
    spec = PhantomSpec(
        kind=cfg["phantom"]["kind"],
        size=(grid.nx, grid.ny),
        parameters=tuple(tuple(row) for row in cfg["phantom"].get("parameters", [])),
        pixel_size=grid.pixel_size,
    )
    return make_phantom(spec)


def build_schedule(cfg: dict) -> NoiseSchedule:
    d = cfg["dosm"]
    return NoiseSchedule(float(d["sigma_min"]), float(d["sigma_max"]), int(d["n_steps"]))


def _simulate_data(cfg: dict) -> tuple[Image, Sinogram, Sinogram]:
    """Phantom, full sinogram and the sparse-view subset per the config."""
    phantom = build_phantom(cfg)
    geom = build_geometry(cfg)
    noise_seed = cfg["noise"].get("seed", cfg["seed"])
    noise = NoiseSpec(sigma=float(cfg["noise"].get("sigma", 0.0)), seed=int(noise_seed))
    sino_full = simulate_measurement(phantom, geom, noise)
    sino_sparse = subsample_views(sino_full, int(cfg["views"]))
    return phantom, sino_full, sino_sparse


def _load_inputs(cfg: dict):
    """Sinogram + grid + optional ground truth, from files or inline simulation."""
    paths = cfg.get("paths", {})
    grid = grid_from_json(cfg["grid"])
    if "sim_dir" in paths:
        sim = Path(paths["sim_dir"])
        with open(sim / "geometry_sparse.json") as fh:
            geom = geometry_from_json(json.load(fh))
        sino_vals, _ = read_array(sim / "sino_sparse.f32raw")
        sino = Sinogram(geom, sino_vals.astype(np.float64))
        truth = None
        gt_path = sim / "phantom.f32raw"
        if gt_path.exists():
            gt_vals, _ = read_array(gt_path)
            truth = Image(grid, gt_vals.astype(np.float64))
        return sino, grid, truth
    phantom, _, sino_sparse = _simulate_data(cfg)
    return sino_sparse, grid, phantom


class _Manifest:
    def __init__(self, command: str, cfg: dict, out_dir: Path):
        self.doc = {
            "command": command,
            "code_version": __version__,
            "config": cfg,
            "config_hash": config_hash(cfg),
            "seed": cfg["seed"],
            "prng": "pcg64",
            "inputs": {},
            "outputs": [],
            "timings_s": {},
        }
        self.out_dir = out_dir
        self._t0 = time.monotonic()
        self._phase_start = self._t0

    def phase(self, name: str) -> None:
        now = time.monotonic()
        self.doc["timings_s"][name] = round(now - self._phase_start, 6)
        self._phase_start = now

    def add_output(self, path) -> None:
        self.doc["outputs"].append(str(path))

    def write(self) -> Path:
        self.doc["timings_s"]["total"] = round(time.monotonic() - self._t0, 6)
        path = self.out_dir / "manifest.json"
        with open(path, "w") as fh:
            json.dump(self.doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("simulate", cfg, out)

    phantom, sino_full, sino_sparse = _simulate_data(cfg)
    grid = phantom.grid
    manifest.phase("simulate")

    ghash = geometry_hash(sino_full.geometry, grid)
    manifest.add_output(write_array(out / "phantom.f32raw", phantom.values,
                                    {"kind": "image", "grid": grid_to_json(grid)}))
    manifest.add_output(write_array(out / "sino_full.f32raw", sino_full.values,
                                    {"kind": "sinogram", "geometry_hash": ghash,
                                     "noise_sigma": cfg["noise"].get("sigma", 0.0)}))
    manifest.add_output(write_array(out / "sino_sparse.f32raw", sino_sparse.values,
                                    {"kind": "sinogram", "views": int(cfg["views"]),
                                     "geometry_hash": geometry_hash(sino_sparse.geometry, grid)}))
    for name, geom in (("geometry_full.json", sino_full.geometry),
                       ("geometry_sparse.json", sino_sparse.geometry)):
        with open(out / name, "w") as fh:
            json.dump(geometry_to_json(geom), fh, indent=1)
            fh.write("\n")
        manifest.add_output(out / name)
    manifest.add_output(write_pgm(out / "phantom.pgm", phantom.values))
    manifest.add_output(write_pgm(out / "sino_sparse.pgm", sino_sparse.values))
    manifest.phase("write")
    manifest.write()
    print(f"simulate: wrote {int(cfg['views'])}-view data to {out}")
    return 0


def _run_method(method: str, cfg: dict, sino: Sinogram, grid: ImageGrid, truth):
    """Returns (reconstruction, trace_or_None)."""
    if method == "fbp":
        return fbp(sino, grid), None
    if method == "sirt":
        return sirt_reconstruct(sino, grid, int(cfg["sirt"]["n_iters"])), None
    if method == "fista":
        f = cfg["fista"]
        step = f["step"]
        fista_cfg = FistaConfig(lam=float(f["lam"]), n_iters=int(f["n_iters"]),
                                step=step if step == "auto" else float(step))
        return fista_tv(sino, grid, fista_cfg), None
    if method == "dosm":
        ckpt = cfg.get("paths", {}).get("checkpoint")
        if not ckpt:
            raise ConfigError("method=dosm needs paths.checkpoint in the config")
        if not Path(ckpt).exists():
            raise ConfigError(f"checkpoint not found: {ckpt}")
        model = load_checkpoint(ckpt)
        d = cfg["dosm"]
        dosm_cfg = DosmConfig(
            schedule=build_schedule(cfg),
            n_channels=int(d["n_channels"]),
            dc_inner_iters=int(d["dc_inner_iters"]),
            beta=float(d["beta"]),
            corrector_snr=float(d["corrector_snr"]),
            n_corrector_steps=int(d["n_corrector_steps"]),
            seed=int(cfg["seed"]),
            coupling_mode=d.get("coupling_mode", "prox"),
        )
        score = DenoiserScore(model, dosm_cfg.schedule)
        metrics_fn = None
        if truth is not None:
            span = float(truth.values.max() - truth.values.min()) or 1.0

            def metrics_fn(est, ref, _span=span):
                rep = evaluate(est, ref, _span)
                return {"psnr": rep.psnr, "ssim": rep.ssim}

        return dosm_reconstruct(sino, grid, score, dosm_cfg,
                                ground_truth=truth, metrics_fn=metrics_fn)
    raise ConfigError(f"unknown method {method!r}")


def cmd_reconstruct(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("reconstruct", cfg, out)
    sino, grid, truth = _load_inputs(cfg)
    manifest.doc["inputs"]["views"] = sino.geometry.n_views
    manifest.phase("load")

    recon, trace = _run_method(args.method, cfg, sino, grid, truth)
    manifest.phase("reconstruct")

    manifest.add_output(write_array(out / "recon.f32raw", recon.values,
                                    {"kind": "image", "method": args.method,
                                     "grid": grid_to_json(grid)}))
    manifest.add_output(write_pgm(out / "recon.pgm", recon.values))
    if truth is not None:
        manifest.add_output(write_array(out / "difference.f32raw",
                                        recon.values - truth.values,
                                        {"kind": "difference", "method": args.method}))
        report = evaluate(recon, truth)
        manifest.add_output(write_csv(out / "metrics.csv",
                                      ["method", "views", "psnr", "ssim"],
                                      [[args.method, sino.geometry.n_views,
                                        report.psnr, report.ssim]]))
        print(f"reconstruct[{args.method}]: psnr={report.psnr:.3f} dB ssim={report.ssim:.4f}")
    else:
        print(f"reconstruct[{args.method}]: done (no ground truth provided)")
    if trace is not None:
        rows = [[r["step"], r["sigma"], r["residual"],
                 r.get("psnr", ""), r.get("ssim", "")] for r in trace.rows]
        manifest.add_output(write_csv(out / "trace.csv",
                                      ["step", "sigma", "residual", "psnr", "ssim"], rows))
    manifest.phase("write")
    manifest.write()
    return 0


def cmd_train_score(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("train-score", cfg, out)

    t = cfg["train"]
    grid = grid_from_json(cfg["grid"])
    if t["dataset"] == "ellipses":
        dataset = random_ellipse_images(int(t["n_images"]), grid,
                                        seed=int(t["dataset_seed"]),
                                        blob_fraction=float(t["blob_fraction"]))
    else:
        raise ConfigError(f"unknown training dataset {t['dataset']!r}")
    manifest.phase("dataset")

    schedule = build_schedule(cfg)
    model = ConvDenoiser(schedule, hidden_channels=int(t["hidden_channels"]),
                         data_scale=float(t["data_scale"]), seed=int(t["model_seed"]))
    train_cfg = TrainConfig(
        learning_rate=float(t["learning_rate"]),
        batch_size=int(t["batch_size"]),
        epochs=int(t["epochs"]),
        steps_per_epoch=int(t["steps_per_epoch"]),
        seed=int(cfg["seed"]),
    )
    model, losses = dsm_train(dataset, schedule, model, train_cfg)
    manifest.phase("train")

    ckpt = out / "score.ckpt"
    save_checkpoint(ckpt, model)
    manifest.add_output(ckpt)
    manifest.add_output(write_csv(out / "loss.csv", ["epoch", "loss"],
                                  [[e, l] for e, l in enumerate(losses)]))
    manifest.phase("write")
    manifest.write()
    final = losses[-1] if losses else float("nan")
    print(f"train-score: {train_cfg.epochs} epochs, final loss {final:.6f}, checkpoint {ckpt}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("ablate", cfg, out)
    values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    if not values:
        raise ConfigError("ablate needs a nonempty comma-separated --values list")

    sino, grid, truth = _load_inputs(cfg)
    if truth is None:
        raise ConfigError("ablate needs ground truth (inline simulation or phantom file)")
    manifest.phase("load")

    field = {"N": "n_channels", "K": "dc_inner_iters", "beta": "beta"}[args.axis]
    rows = []
    for value in sorted(values):
        run_cfg = copy.deepcopy(cfg)
        run_cfg["dosm"][field] = value if args.axis == "beta" else int(value)
        recon, _ = _run_method("dosm", run_cfg, sino, grid, truth)
        report = evaluate(recon, truth)
        rows.append([args.axis, value, report.psnr, report.ssim])
        print(f"ablate {args.axis}={value}: psnr={report.psnr:.3f} ssim={report.ssim:.4f}")
    manifest.phase("runs")

    manifest.add_output(write_csv(out / "ablation.csv",
                                  ["axis", "value", "psnr", "ssim"], rows))
    manifest.phase("write")
    manifest.write()
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dosmct",
        description="Ultra-sparse-view CT reconstruction toolkit",
    )
    parser.add_argument("--version", action="version", version=f"dosmct {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (overrides flags)")
        p.add_argument("--seed", type=int, help="master seed (u64)")
        p.add_argument("--out", required=True, help="output directory")

    p_sim = sub.add_parser("simulate", help="phantom + sinogram simulation")
    common(p_sim)
    p_sim.add_argument("--views", type=int, help="sparse view count to keep")
    p_sim.set_defaults(func=cmd_simulate)

    p_rec = sub.add_parser("reconstruct", help="run one reconstruction method")
    common(p_rec)
    p_rec.add_argument("--views", type=int, help="sparse view count (inline simulation)")
    p_rec.add_argument("--method", required=True, choices=["fbp", "sirt", "fista", "dosm"])
    p_rec.set_defaults(func=cmd_reconstruct)

    p_tr = sub.add_parser("train-score", help="denoising-score-matching training")
    common(p_tr)
    p_tr.set_defaults(func=cmd_train_score)

    p_ab = sub.add_parser("ablate", help="sweep one sampler factor")
    common(p_ab)
    p_ab.add_argument("--views", type=int, help="sparse view count (inline simulation)")
    p_ab.add_argument("--axis", required=True, choices=["N", "K", "beta"])
    p_ab.add_argument("--values", required=True, help="comma-separated values")
    p_ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        _set_thread_cap()
        return args.func(args)
    except ConfigError as exc:
        print(f"dosmct: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"dosmct: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
