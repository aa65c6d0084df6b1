"""Command-line entry point wiring the library into reproducible runs.

Subcommands: fit, train, train-adapter, train-scale, simulate-partial,
eval, make-spec. Exit codes: 0 success, 1 runtime failure, 2 usage
error. Option precedence for training runs is flags > config file >
defaults; every run writes (or prints) its fully resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import adapter as adapter_mod
from . import scalepred
from .bodymodel import BodyParams, lbs_forward, load_model
from .fitter import default_schedule, fit, visibility_from_cloud
from .landmarks import default_spec, load_spec, save_spec
from .meshio import load_mesh, load_points, save_mesh, save_points
from .metrics import evaluate_dataset
from .pointcloud import NORMALIZED, PointCloud, TriMesh, sample_surface, simulate_partial
from .predictor import PredictorConfig, load_checkpoint, predict, train

log = logging.getLogger(__name__)


class UsageError(RuntimeError):
    """Bad flags/config; maps to exit code 2."""


# --------------------------------------------------------------- helpers


def _read_json(path) -> dict:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: No such file")
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})")
    if not isinstance(payload, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return payload


def _resolve_options(args, defaults: dict, keys: tuple[str, ...]) -> dict:
    """flags > config file > defaults for the listed option keys."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _read_json(args.config)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(
                f"{args.config}: unknown config keys {sorted(unknown)}; "
                f"allowed: {sorted(defaults)}"
            )
        resolved.update(file_cfg)
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            resolved[key] = val
    if "mlp_hidden_dims" in resolved:
        resolved["mlp_hidden_dims"] = tuple(resolved["mlp_hidden_dims"])
    return resolved


def _emit_config(resolved: dict, sidecar, print_only: bool) -> bool:
    """Log the resolved run config; return True when the run should stop
    (--print-config)."""
    text = json.dumps(resolved, indent=2, sort_keys=True, default=str)
    if print_only:
        print(text)
        return True
    log.info("resolved config: %s", text)
    if sidecar is not None:
        sidecar = Path(sidecar)
        sidecar.parent.mkdir(parents=True, exist_ok=True)
        sidecar.write_text(text + "\n")
    return False


def _load_manifest(path, required: tuple[str, ...], optional: tuple[str, ...] = ()) -> list[dict]:
    """JSON-lines manifest; one object per line with path-valued fields.

    Relative paths resolve against the manifest's directory. All schema
    violations are reported together, with line numbers.
    """
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{path}: No such file")
    base = path.parent
    records = []
    problems = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            problems.append(f"line {lineno}: invalid JSON")
            continue
        if not isinstance(obj, dict):
            problems.append(f"line {lineno}: expected an object")
            continue
        record = {"_line": lineno}
        for key in required + optional:
            if key not in obj:
                if key in required:
                    problems.append(f"line {lineno}: missing key {key!r}")
                continue
            val = obj[key]
            if not isinstance(val, str):
                problems.append(f"line {lineno}: key {key!r} must be a path string")
                continue
            record[key] = base / val
        unknown = set(obj) - set(required) - set(optional)
        if unknown:
            problems.append(f"line {lineno}: unknown keys {sorted(unknown)}")
        records.append(record)
    if problems:
        raise UsageError(f"{path}: manifest errors:\n  " + "\n  ".join(problems))
    if not records:
        raise UsageError(f"{path}: manifest is empty")
    return records


def _load_landmark_file(path) -> np.ndarray:
    payload = json.loads(Path(path).read_text())
    if isinstance(payload, dict):
        payload = payload.get("landmarks", payload)
    arr = np.asarray(payload, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise UsageError(f"{path}: landmarks must be an M x 3 array")
    return arr


def _load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


def _load_params_file(path) -> BodyParams:
    payload = _read_json(path)
    if "params" in payload:  # a fit report wraps the params
        payload = payload["params"]
    missing = {"beta", "theta", "psi", "trans"} - set(payload)
    if missing:
        raise UsageError(f"{path}: missing parameter fields {sorted(missing)}")
    return BodyParams(
        beta=np.asarray(payload["beta"], dtype=np.float64),
        theta=np.asarray(payload["theta"], dtype=np.float64),
        psi=np.asarray(payload["psi"], dtype=np.float64),
        trans=np.asarray(payload["trans"], dtype=np.float64),
    )


def _input_cloud(path, sample_points: int, seed: int) -> PointCloud:
    """A cloud file loads directly; a mesh is surface-sampled."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return sample_surface(load_mesh(path), sample_points, seed=seed)
    try:
        return load_points(path)
    except Exception:
        if suffix == ".ply":  # a PLY may be a mesh rather than a cloud
            return sample_surface(load_mesh(path), sample_points, seed=seed)
        raise


# --------------------------------------------------------------- fit


def _fit_one(args, input_path) -> dict:
    assets = load_model(args.model)
    spec = load_spec(args.spec)
    cloud = _input_cloud(input_path, args.sample_points, args.seed)
    if args.normalized:
        cloud = PointCloud(cloud.points, scale_state=NORMALIZED, completeness=cloud.completeness)

    scale_used = None
    if args.scale_checkpoint:
        weights = scalepred.load_scale_predictor(args.scale_checkpoint)
        if cloud.scale_state != NORMALIZED:
            from .pointcloud import normalize_unit

            cloud, _, _ = normalize_unit(cloud)
        scale_used = scalepred.predict_scale(cloud, weights)
        cloud = scalepred.restore_scale(cloud, scale_used)

    image = _load_image(args.image) if args.image else None
    if args.landmarks:
        targets = _load_landmark_file(args.landmarks)
    else:
        ckpt = load_checkpoint(args.checkpoint)
        if args.adapter:
            adapter_mod.attach(ckpt, adapter_mod.load_adapter(args.adapter))
        targets = predict(cloud.points, ckpt, image=image)

    mask = None
    if args.mask_partial:
        mask = visibility_from_cloud(targets, cloud.points, args.mask_threshold)
    report = fit(assets, spec, targets, schedule=default_schedule(), mask=mask)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(input_path).stem
    payload = report.to_dict()
    payload["input"] = str(input_path)
    if scale_used is not None:
        payload["restored_scale"] = scale_used
    (out_dir / f"{stem}.report.json").write_text(json.dumps(payload, indent=2) + "\n")
    verts, _ = lbs_forward(assets, report.params)
    save_mesh(TriMesh(verts, assets.faces), out_dir / f"{stem}.fitted.ply")
    return {"input": str(input_path), "rmse": report.rmse}


def _fit_job(payload):  # module-level so it pickles for --jobs
    namespace, input_path = payload
    return _fit_one(argparse.Namespace(**namespace), input_path)


def cmd_fit(args) -> int:
    if args.image and not args.adapter:
        raise UsageError(
            "--image needs --adapter: the base checkpoint has no image "
            "branch, train one and pass it via --adapter"
        )
    if args.normalized and not args.scale_checkpoint:
        raise UsageError(
            "input declared normalized but no way to restore size: pass "
            "--scale-checkpoint, or supply metric data"
        )
    if args.normalized and args.assume_metric:
        raise UsageError("--normalized contradicts --assume-metric")
    if args.checkpoint is None and args.landmarks is None:
        raise UsageError("pass --checkpoint (predictor) or --landmarks (precomputed targets)")
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    resolved["inputs"] = [str(p) for p in resolved.pop("input")]
    if _emit_config(resolved, Path(args.out) / "run_config.json", args.print_config):
        return 0

    if args.jobs > 1 and len(args.input) > 1:
        namespace = {k: v for k, v in vars(args).items() if k != "func"}
        jobs = [(namespace, p) for p in args.input]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_fit_job, jobs))
    else:
        results = [_fit_one(args, p) for p in args.input]
    for res in results:
        print(f"{res['input']}: rmse {res['rmse']:.6g}")
    return 0


# --------------------------------------------------------------- training

_TRAIN_DEFAULTS = {
    "lr": 5e-5,
    "weight_decay": 1e-2,
    "epochs": 1,
    "batch_size": 8,
    "seed": 0,
    "lr_schedule": "constant",
    "warmup_steps": 0,
}
_TRAIN_KEYS = tuple(_TRAIN_DEFAULTS)


def _predictor_arch_defaults() -> dict:
    cfg = PredictorConfig()
    return {
        "num_landmarks": cfg.num_landmarks,
        "feature_dim": cfg.feature_dim,
        "encoder_blocks": cfg.encoder_blocks,
        "decoder_blocks": cfg.decoder_blocks,
        "num_patches": cfg.num_patches,
        "patch_neighbors": cfg.patch_neighbors,
        "attention_heads": cfg.attention_heads,
        "mlp_hidden_dims": list(cfg.mlp_hidden_dims),
    }


def cmd_train(args) -> int:
    defaults = {**_TRAIN_DEFAULTS, **_predictor_arch_defaults()}
    resolved = _resolve_options(args, defaults, _TRAIN_KEYS)
    resolved_view = {**resolved, "manifest": str(args.manifest), "out": str(args.out),
                     "resume": str(args.resume) if args.resume else None}
    if _emit_config(resolved_view, str(args.out) + ".run.json", args.print_config):
        return 0

    records = _load_manifest(args.manifest, required=("cloud", "landmarks"))
    samples = [
        (load_points(r["cloud"]).points, _load_landmark_file(r["landmarks"]))
        for r in records
    ]
    init = load_checkpoint(args.resume) if args.resume else None
    config = None
    if init is None:
        arch = {k: resolved[k] for k in _predictor_arch_defaults()}
        arch["mlp_hidden_dims"] = tuple(arch["mlp_hidden_dims"])
        config = PredictorConfig(**arch)
    train(
        samples,
        config,
        lr=resolved["lr"],
        weight_decay=resolved["weight_decay"],
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        seed=resolved["seed"],
        lr_schedule=resolved["lr_schedule"],
        warmup_steps=resolved["warmup_steps"],
        init=init,
        log_path=args.log or str(args.out) + ".log.jsonl",
        checkpoint_path=args.out,
    )
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_train_adapter(args) -> int:
    defaults = {k: _TRAIN_DEFAULTS[k] for k in ("lr", "weight_decay", "epochs", "batch_size", "seed")}
    defaults.update({"image_dim": 64, "patch_size": 16})
    resolved = _resolve_options(args, defaults, tuple(defaults))
    resolved_view = {**resolved, "manifest": str(args.manifest), "out": str(args.out),
                     "base_checkpoint": str(args.base_checkpoint)}
    if _emit_config(resolved_view, str(args.out) + ".run.json", args.print_config):
        return 0

    records = _load_manifest(args.manifest, required=("cloud", "landmarks", "image"))
    samples = [
        (
            load_points(r["cloud"]).points,
            _load_landmark_file(r["landmarks"]),
            _load_image(r["image"]),
        )
        for r in records
    ]
    base = load_checkpoint(args.base_checkpoint)
    trained = adapter_mod.train_adapter(
        base,
        samples,
        lr=resolved["lr"],
        weight_decay=resolved["weight_decay"],
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        seed=resolved["seed"],
        image_dim=resolved["image_dim"],
        patch_size=resolved["patch_size"],
        log_path=args.log or str(args.out) + ".log.jsonl",
    )
    adapter_mod.save_adapter(trained, args.out)
    print(f"adapter written to {args.out}")
    return 0


def cmd_train_scale(args) -> int:
    scale_cfg = scalepred.ScaleConfig()
    defaults = dict(_TRAIN_DEFAULTS)
    defaults["batch_size"] = 16
    defaults.update(
        feature_dim=scale_cfg.feature_dim,
        encoder_blocks=scale_cfg.encoder_blocks,
        num_patches=scale_cfg.num_patches,
        patch_neighbors=scale_cfg.patch_neighbors,
        attention_heads=scale_cfg.attention_heads,
        mlp_hidden_dims=list(scale_cfg.mlp_hidden_dims),
    )
    resolved = _resolve_options(args, defaults, _TRAIN_KEYS)
    resolved_view = {**resolved, "manifest": str(args.manifest), "out": str(args.out),
                     "resume": str(args.resume) if args.resume else None}
    if _emit_config(resolved_view, str(args.out) + ".run.json", args.print_config):
        return 0

    from .pointcloud import normalize_unit

    records = _load_manifest(args.manifest, required=("cloud",))
    samples = []
    for r in records:
        normalized, _, inv_scale = normalize_unit(load_points(r["cloud"]))
        samples.append((normalized, inv_scale))
    init = scalepred.load_scale_predictor(args.resume) if args.resume else None
    config = None
    if init is None:
        config = scalepred.ScaleConfig(
            feature_dim=resolved["feature_dim"],
            encoder_blocks=resolved["encoder_blocks"],
            num_patches=resolved["num_patches"],
            patch_neighbors=resolved["patch_neighbors"],
            attention_heads=resolved["attention_heads"],
            mlp_hidden_dims=tuple(resolved["mlp_hidden_dims"]),
        )
    weights = scalepred.train_scale(
        samples,
        config,
        lr=resolved["lr"],
        weight_decay=resolved["weight_decay"],
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        seed=resolved["seed"],
        lr_schedule=resolved["lr_schedule"],
        warmup_steps=resolved["warmup_steps"],
        init=init,
        log_path=args.log or str(args.out) + ".log.jsonl",
    )
    scalepred.save_scale_predictor(weights, args.out)
    print(f"scale predictor written to {args.out}")
    return 0


# --------------------------------------------------------------- utilities


def cmd_simulate_partial(args) -> int:
    try:
        view = tuple(float(v) for v in args.view.split(","))
    except ValueError:
        raise UsageError(f"--view must be three comma-separated numbers, got {args.view!r}")
    if len(view) != 3:
        raise UsageError(f"--view must have three components, got {len(view)}")
    mesh = load_mesh(args.mesh)
    cloud = simulate_partial(mesh, view, resolution=args.resolution, n=args.points, seed=args.seed)
    save_points(cloud, args.out)
    print(f"{cloud.points.shape[0]} partial points written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    if bool(args.pred) != bool(args.gt):
        raise UsageError("--pred and --gt go together")
    if not args.pred and not args.pairs:
        raise UsageError("pass --pred/--gt or --pairs")
    assets = load_model(args.model)
    pairs = []
    if args.pred:
        pairs.append((_load_params_file(args.pred), _load_params_file(args.gt)))
    if args.pairs:
        for rec in _load_manifest(args.pairs, required=("pred", "gt")):
            pairs.append((_load_params_file(rec["pred"]), _load_params_file(rec["gt"])))
    result = evaluate_dataset(pairs, assets)
    print(result.table())
    if args.out:
        Path(args.out).write_text(result.to_json() + "\n")
    return 0


def cmd_make_spec(args) -> int:
    assets = load_model(args.model)
    spec = default_spec(
        assets,
        allocation=(args.hands, args.head, args.body),
        seed=args.seed,
        name=args.name,
    )
    save_spec(spec, args.out)
    print(f"{len(spec)} landmarks written to {args.out}")
    return 0


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bodyfit",
        description="Fit parametric bodies to point clouds via dense landmarks.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit body parameters to a cloud or mesh")
    p.add_argument("--input", nargs="+", required=True, help="cloud (.ply/.xyz) or mesh (.obj/.ply) files")
    p.add_argument("--model", required=True, help="body model container")
    p.add_argument("--spec", required=True, help="landmark spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", help="landmark predictor checkpoint")
    p.add_argument("--landmarks", help="precomputed target landmarks JSON (bypasses the predictor)")
    p.add_argument("--image", help="RGB image for the adapter branch")
    p.add_argument("--adapter", help="adapter checkpoint (required with --image)")
    scale_group = p.add_mutually_exclusive_group()
    scale_group.add_argument("--scale-checkpoint", help="restore physical size with this scale predictor")
    scale_group.add_argument("--assume-metric", action="store_true",
                             help="trust the input coordinates as metric (default behavior)")
    p.add_argument("--normalized", action="store_true",
                   help="declare the input already normalized; needs --scale-checkpoint")
    p.add_argument("--mask-partial", action="store_true",
                   help="down-weight landmarks far from any input point")
    p.add_argument("--mask-threshold", type=float, default=0.1)
    p.add_argument("--sample-points", type=int, default=4096, help="samples drawn when the input is a mesh")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="parallel fits over multiple inputs")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_fit)

    def add_train_common(p, batch_default_note=""):
        p.add_argument("--manifest", required=True, help="JSON-lines training manifest")
        p.add_argument("--out", required=True, help="output checkpoint path")
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--lr", type=float)
        p.add_argument("--weight-decay", type=float, dest="weight_decay")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--seed", type=int)
        p.add_argument("--log", help="JSON-lines loss log path (default <out>.log.jsonl)")
        p.add_argument("--print-config", action="store_true")

    p = sub.add_parser("train", help="train the landmark predictor")
    add_train_common(p)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=("constant", "cosine"))
    p.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-adapter", help="train an image adapter on a frozen base")
    add_train_common(p)
    p.add_argument("--base-checkpoint", required=True, dest="base_checkpoint",
                   help="frozen landmark predictor checkpoint")
    p.add_argument("--image-dim", type=int, dest="image_dim")
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.set_defaults(func=cmd_train_adapter)

    p = sub.add_parser("train-scale", help="train the scale regressor")
    add_train_common(p)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=("constant", "cosine"))
    p.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    p.add_argument("--resume", help="continue from this scale checkpoint")
    p.set_defaults(func=cmd_train_scale)

    p = sub.add_parser("simulate-partial", help="single-view partial sampling of a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--view", required=True, help="camera direction as x,y,z")
    p.add_argument("--out", required=True, help="output cloud (.ply/.xyz)")
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--resolution", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate_partial)

    p = sub.add_parser("eval", help="per-region V2V/MPJPE between fitted and true params")
    p.add_argument("--model", required=True)
    p.add_argument("--pred", help="fitted params or fit report JSON")
    p.add_argument("--gt", help="ground-truth params JSON")
    p.add_argument("--pairs", help="JSON-lines manifest of {pred, gt} paths")
    p.add_argument("--out", help="write the JSON report here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-spec", help="emit a landmark spec for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hands", type=int, default=180)
    p.add_argument("--head", type=int, default=120)
    p.add_argument("--body", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_make_spec)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure contract: exit 1, message on stderr
        if args.verbose:
            raise
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
