"""Command line interface: ``scenedecomp {generate,render,fit,eval,edit}``.

Every subcommand accepts ``--config PATH`` (JSON object whose keys are option
names), ``--seed``, ``--out DIR`` and ``--threads N``.  Options given on the
command line override the config file, which overrides built-in defaults.  The
effective configuration is written to ``OUT/effective_config.json`` before any
other output.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io

log = logging.getLogger("scenedecomp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# defaults live here rather than in argparse so config files can sit between them and the flags
DEFAULTS = {
    "common": {"seed": 0, "threads": 1},
    "generate": {"count": None, "train": 180, "val": 20, "test": 50, "objects": "2,3,4,5", "noise": 0.0, "fov": 30.0,
                 "size": 64, "march_steps": 96},
    "render": {"steps": 96, "far": 12.0},
    "fit": {"split": "test", "limit": 0, "slots": 3, "steps_per_slot": 150, "final_steps": 250, "lr": 1e-2,
            "march_steps": 12, "init_color": "target", "no_prune": False, "merge_steps": 60, "snapshots": True},
    "eval": {"split": "test", "limit": 0, "sym_period": 90.0, "min_pixels": 25, "march_steps": 96},
    "edit": {"op": [], "steps": 96},
}


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", type=Path, help="JSON file with option values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--threads", type=int, help="worker processes")


class _OpAction(argparse.Action):
    """Shorthand edit flags that append to the ordered ``--op`` list."""

    _KIND = {"--swap": "swap", "--remove": "remove", "--sample-pose": "random-pose"}

    def __call__(self, parser, namespace, values, option_string=None):
        vals = values if isinstance(values, list) else [values]
        ops = list(getattr(namespace, self.dest) or [])
        ops.append(f"{self._KIND[option_string]}:{','.join(vals)}")
        setattr(namespace, self.dest, ops)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scenedecomp", description="Object-level scene decomposition by SDF rendering.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate a synthetic RGB-D dataset")
    _common(g)
    g.add_argument("--count", type=int, help="write COUNT scenes into a single test split")
    g.add_argument("--train", type=int)
    g.add_argument("--val", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--objects", help="comma-separated object counts drawn per scene")
    g.add_argument("--noise", type=float, help="RGB noise sigma")
    g.add_argument("--fov", type=float, help="vertical field of view in degrees")
    g.add_argument("--size", type=int, help="image width and height")
    g.add_argument("--march-steps", type=int)

    r = sub.add_parser("render", help="render a scene file to RGB, depth and mask")
    _common(r)
    r.add_argument("scene", type=Path)
    r.add_argument("--steps", type=int, help="march samples per ray")
    r.add_argument("--far", type=float)

    f = sub.add_parser("fit", help="fit scene latents to dataset images")
    _common(f)
    f.add_argument("--data", type=Path, required=True, help="dataset directory")
    f.add_argument("--split")
    f.add_argument("--limit", type=int, help="fit only the first N scenes (0 = all)")
    f.add_argument("--ids", help="comma-separated scene names to fit")
    f.add_argument("--slots", type=int)
    f.add_argument("--steps-per-slot", type=int)
    f.add_argument("--final-steps", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--march-steps", type=int)
    f.add_argument("--init-color", choices=["target", "neutral"])
    f.add_argument("--no-prune", action="store_const", const=True)
    f.add_argument("--merge-steps", type=int, help="refit budget for the redundant-slot check (0 = off)")
    f.add_argument("--no-snapshots", dest="snapshots", action="store_const", const=False)

    e = sub.add_parser("eval", help="score fitted scenes against ground truth")
    _common(e)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--pred", type=Path, required=True, help="fit output directory")
    e.add_argument("--split")
    e.add_argument("--limit", type=int, help="score only the first N scenes (0 = all)")
    e.add_argument("--ids", help="comma-separated scene names to score")
    e.add_argument("--sym-period", type=float, help="rotation symmetry period in degrees (0 = none)")
    e.add_argument("--min-pixels", type=int)
    e.add_argument("--march-steps", type=int)

    d = sub.add_parser("edit", help="edit a scene file and render the result")
    _common(d)
    d.add_argument("scene", type=Path)
    d.add_argument("--op", action="append",
                   help="swap:I,J | remove:I | shape:I=J (copy slot J's shape) | texture:I=R,G,B | "
                        "pose:I=X,Y,THETA_DEG | random-pose:I")
    d.add_argument("--swap", nargs=2, metavar=("I", "J"), dest="op", action=_OpAction, help="same as --op swap:I,J")
    d.add_argument("--remove", metavar="I", dest="op", action=_OpAction, help="same as --op remove:I")
    d.add_argument("--sample-pose", metavar="I", dest="op", action=_OpAction,
                   help="same as --op random-pose:I")
    d.add_argument("--steps", type=int)
    return parser


def effective_config(args: argparse.Namespace) -> dict:
    cmd = args.command
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[cmd])
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        section = loaded.get(cmd, loaded)
        known = (set(cfg) | set(vars(args))) - {"command", "config", "verbose"}
        section = {k: v for k, v in section.items() if k not in COMMANDS}
        unknown = set(section) - known
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        cfg.update(section)
    for k, v in vars(args).items():
        if k in ("command", "config", "verbose") or v is None:
            continue
        cfg[k] = str(v) if isinstance(v, Path) else v
    if cfg["threads"] < 1:
        raise UsageError("--threads must be at least 1")
    return cfg


def write_effective_config(out: Path, cmd: str, cfg: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.json"
    path.write_text(json.dumps({"command": cmd, **cfg}, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _int_list(text: str, what: str) -> list[int]:
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad {what}: {text!r}") from exc
    if not vals:
        raise UsageError(f"empty {what}")
    return vals


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: dict, out: Path) -> int:
    from .datagen import DatasetManifest, GeneratorConfig, generate_dataset, load_scene_record
    from .plotting import dataset_sheet

    try:
        gen = GeneratorConfig(width=cfg["size"], height=cfg["size"], fov_deg=cfg["fov"],
                              march_steps=cfg["march_steps"])
        if cfg.get("count") is not None:
            splits = {"test": cfg["count"]}
        else:
            splits = {"train": cfg["train"], "val": cfg["val"], "test": cfg["test"]}
        manifest = DatasetManifest(splits=splits,
                                   seed=cfg["seed"], noise_sigma=cfg["noise"],
                                   object_counts=tuple(_int_list(cfg["objects"], "object counts")), generator=gen)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    indexed = generate_dataset(manifest, out, threads=cfg["threads"], progress=lambda n: log.info("scene %s", n))
    first = [n for names in indexed.files.values() for n in names][:8]
    if first:
        recs = [load_scene_record(out, n) for n in first]
        dataset_sheet([r.rgb for r in recs], [r.mask for r in recs], first, out / "figures" / "samples.png")
    print(f"wrote {sum(len(v) for v in indexed.files.values())} scenes to {out}")
    return EXIT_OK


def _load_scene(path: Path):
    from .scene import SceneFormatError, loads_scene

    try:
        return loads_scene(Path(path).read_text(encoding="utf-8"), Path(path).parent)
    except OSError as exc:
        raise DataError(f"cannot read scene {path}: {exc}") from exc
    except SceneFormatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _write_render(scene, out: Path, steps: int, far: float = 12.0, stem: str = "render") -> None:
    from .plotting import render_panel
    from .renderer import RayMarchConfig

    render, _ = scene.render(RayMarchConfig(steps=steps, far=far))
    io.write_rgb(out / f"{stem}.png", render.color_value)
    io.write_depth(out / f"{stem}_depth.f32", np.minimum(render.depth_value, far))
    io.write_mask(out / f"{stem}_mask.png", render.instance_ids())
    render_panel(render.color_value, np.minimum(render.depth_value, far), render.instance_ids(),
                 out / "figures" / f"{stem}.png", far)
    counts = np.bincount(render.instance_ids().ravel(), minlength=len(scene.active) + 1)
    with open(out / f"{stem}_objects.csv", "w", encoding="utf-8") as fh:
        fh.write("object,visible_pixels\n")
        for k in range(len(scene.active)):
            fh.write(f"{k},{int(counts[k + 1])}\n")


def cmd_render(cfg: dict, out: Path) -> int:
    scene = _load_scene(Path(cfg["scene"]))
    _write_render(scene, out, cfg["steps"], cfg["far"])
    print(f"rendered {cfg['scene']} to {out}")
    return EXIT_OK


def _fit_config(cfg: dict):
    from .fitting import FitConfig
    from .renderer import RayMarchConfig

    try:
        return FitConfig(slots=cfg["slots"], steps_per_slot=cfg["steps_per_slot"], final_steps=cfg["final_steps"],
                         lr=cfg["lr"], seed=cfg["seed"], init_color=cfg["init_color"], prune=not cfg["no_prune"],
                         merge_steps=cfg["merge_steps"], render=RayMarchConfig(steps=cfg["march_steps"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid fit configuration: {exc}") from exc


def _fit_one(job):
    root, name, out, cfg = job
    from .datagen import load_scene_record
    from .fitting import fit_scene
    from .plotting import loss_curves, snapshot
    from .renderer import RayMarchConfig
    from .scene import dumps_scene

    out = Path(out)
    rec = load_scene_record(root, name)
    fc = _fit_config(cfg)
    with io.JsonlLog(out / "logs" / f"{name}.jsonl") as lg:
        res = fit_scene(rec.rgb, rec.depth, rec.scene.camera, fc, log=lg.write)
    (out / "scenes" / f"{name}.scene").write_text(dumps_scene(res.scene), encoding="utf-8")
    if cfg["snapshots"]:
        render, _ = res.scene.render(RayMarchConfig(steps=96))
        snapshot(rec.rgb, render.color_value, rec.depth, render.depth_value, out / "figures" / f"{name}_fit.png")
        loss_curves(io.read_jsonl(out / "logs" / f"{name}.jsonl"), out / "figures" / f"{name}_loss.png")
    return name, res.init_loss, res.best_loss, len(res.scene.active)


def _names(cfg: dict):
    from .datagen import load_manifest, split_names

    root = Path(cfg["data"])
    try:
        manifest = load_manifest(root)
    except OSError as exc:
        raise DataError(f"cannot read dataset manifest in {root}: {exc}") from exc
    if cfg.get("ids"):
        return root, [n.strip() for n in str(cfg["ids"]).split(",") if n.strip()]
    try:
        names = list(split_names(root, cfg["split"], manifest))
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    if cfg.get("limit"):
        names = names[: cfg["limit"]]
    return root, names


def cmd_fit(cfg: dict, out: Path) -> int:
    _fit_config(cfg)  # reject bad settings before touching the data
    root, names = _names(cfg)
    for sub in ("scenes", "logs", "figures"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    jobs = [(str(root), n, str(out), cfg) for n in names]
    try:
        if cfg["threads"] > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg["threads"]) as pool:
                rows = list(pool.map(_fit_one, jobs))
        else:
            rows = [_fit_one(j) for j in jobs]
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    with open(out / "fits.csv", "w", encoding="utf-8") as fh:
        fh.write("scene,init_loss,final_loss,active_slots\n")
        for name, l0, l1, n in rows:
            fh.write(f"{name},{l0:.8g},{l1:.8g},{n}\n")
    print(f"fitted {len(rows)} scenes into {out}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    from .datagen import load_scene_record
    from .metrics import aggregate, evaluate_scene
    from .plotting import rotation_histogram
    from .renderer import RayMarchConfig

    root, names = _names(cfg)
    pred_dir = Path(cfg["pred"])
    period = math.radians(cfg["sym_period"]) if cfg["sym_period"] else None
    evals, rows = [], []
    for name in names:
        try:
            rec = load_scene_record(root, name)
        except (OSError, ValueError) as exc:
            raise DataError(f"ground truth {name}: {exc}") from exc
        pred_path = pred_dir / "scenes" / f"{name}.scene"
        if pred_path.exists():
            pred = _load_scene(pred_path)
        else:
            # a missing prediction counts as an empty scene: every object a miss
            log.warning("no prediction for %s; scoring it as all false negatives", name)
            pred = replace(rec.scene, objects=[])
        ev = evaluate_scene(pred, rec.scene, rec.rgb, rec.depth, rec.mask, RayMarchConfig(steps=cfg["march_steps"]),
                            period, cfg["min_pixels"])
        evals.append(ev)
        m = ev.matches[0.5]
        rows.append((name, m.tp, m.fp, m.fn, math.sqrt(ev.rgb[0]), ev.rgb[2], ev.rgb[1], *ev.depth))
    if not evals:
        raise DataError("no scenes to evaluate")
    report = aggregate(evals, period)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    with open(out / "per_image.csv", "w", encoding="utf-8") as fh:
        fh.write("scene,tp50,fp50,fn50,rgb_rmse,psnr,ssim,depth_rmse,abs_rd,sq_rd\n")
        for r in rows:
            fh.write(",".join(str(v) if isinstance(v, (str, int)) else f"{v:.6g}" for v in r) + "\n")
    errs = [math.degrees(a) for e in evals for a in e.poses.angles]
    folded = [math.degrees(a) for e in evals for a in e.poses.folded]
    rotation_histogram(errs, out / "figures" / "rotation_errors.png", folded if period else None)
    print(report.to_json())
    return EXIT_OK


def _parse_op(op: str, scene, rng):
    from .fitting import RemoveObject, SetPose, SetShape, SetTexture, SwapPositions, sample_valid_pose

    try:
        kind, _, arg = op.partition(":")
        if kind == "swap":
            a, b = _int_list(arg, "swap indices")
            return SwapPositions(a, b)
        if kind == "remove":
            return RemoveObject(int(arg))
        if kind == "random-pose":
            i = int(arg)
            return SetPose(i, sample_valid_pose(scene, i, rng))
        idx, _, val = arg.partition("=")
        i = int(idx)
        if kind == "shape":
            j = int(val)
            if not 0 <= j < len(scene.objects):
                raise IndexError(f"slot {j} out of range")
            return SetShape(i, scene.objects[j].shape)
        if kind == "texture":
            return SetTexture(i, [float(v) for v in val.split(",")])
        if kind == "pose":
            x, y, th = (float(v) for v in val.split(","))
            e = scene.objects[i].extrinsics
            return SetPose(i, replace(e, position=np.array([x, y, e.position[2]]), z_cos=math.cos(math.radians(th)),
                                      z_sin=math.sin(math.radians(th))))
    except (ValueError, IndexError) as exc:
        raise UsageError(f"bad edit {op!r}: {exc}") from exc
    raise UsageError(f"unknown edit {op!r}")


def cmd_edit(cfg: dict, out: Path) -> int:
    from .fitting import PoseRejected, apply_edit
    from .scene import dumps_scene

    scene = _load_scene(Path(cfg["scene"]))
    rng = np.random.default_rng(cfg["seed"])
    if not cfg["op"]:
        raise UsageError("edit needs at least one --op")
    for op in cfg["op"]:
        try:
            scene = apply_edit(scene, _parse_op(op, scene, rng))
        except IndexError as exc:
            raise UsageError(f"edit {op!r}: {exc}") from exc
        except PoseRejected as exc:
            raise DataError(str(exc)) from exc
    (out / "edited.scene").write_text(dumps_scene(scene), encoding="utf-8")
    _write_render(scene, out, cfg["steps"], stem="edited")
    print(f"wrote edited scene to {out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "render": cmd_render, "fit": cmd_fit, "eval": cmd_eval, "edit": cmd_edit}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.INFO)
        cfg = effective_config(args)
        out = Path(cfg["out"])
        write_effective_config(out, args.command, cfg)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
