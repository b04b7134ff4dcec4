"""Command-line entry point.

Commands: synth, preprocess, fuse, train, eval, param-count, gradcheck.
Exit codes: 0 success, 1 configuration/usage error, 2 data error.
Results are printed to stdout as one JSON object; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from importlib import resources
from typing import List, Optional

import numpy as np

from . import gtn
from .data import (
    ArrayDataset,
    SplitSpec,
    apply_split,
    fuse_blocks,
    load_manifest,
    load_recordings,
    pad_or_crop,
    synthesize_dataset,
    utd_mhad_split,
    write_synthetic,
)
from .errors import ConfigError, DataError, GraphFuseError, ShapeError, UsageError
from .fusion import IMU, RGB, SKELETON, FusionPlan, ModalityBlock, align_blocks
from .graph import SkeletonGraph, build_adjacency, load_topology
from .model import AGCN, ModelConfig, count_parameters
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("graphfuse")

COMMANDS = ("synth", "preprocess", "fuse", "train", "eval", "param-count", "gradcheck")

DATA_KEYS = {
    "manifest", "topology", "sensors", "max_frames", "num_joints", "split", "input", "checkpoint", "eval_split",
}
SYNTH_KEYS = {"classes", "samples_per_class", "num_nodes", "frames", "sensors", "seed", "noise", "imu_scale"}
FUSION_KEYS = {"imu_mode", "attachment", "rgb_mode", "rgb_embed_dim", "rgb_attachment", "frame_stride"}


def _section_keys():
    return {
        "model": set(ModelConfig.__dataclass_fields__),
        "train": set(TrainConfig.__dataclass_fields__),
        "fusion": FUSION_KEYS,
        "data": DATA_KEYS,
        "synth": SYNTH_KEYS,
    }


# -- config handling -------------------------------------------------------------
def load_config(path: Optional[str]) -> dict:
    """Read a JSON config from a path or a bundled config name."""
    if path is None:
        return {}
    if not os.path.exists(path):
        name = path if path.endswith(".json") else f"{path}.json"
        bundled = resources.files("graphfuse").joinpath("configs", name)
        if not bundled.is_file():
            raise ConfigError(f"config {path!r} not found")
        cfg = json.loads(bundled.read_text())
    else:
        with open(path) as fh:
            cfg = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))
        data = cfg.get("data", {})
        for key in ("manifest", "input", "checkpoint"):
            if isinstance(data.get(key), str) and not os.path.isabs(data[key]):
                data[key] = os.path.join(base, data[key])
        top = data.get("topology")
        if isinstance(top, str) and os.path.exists(os.path.join(base, top)):
            data["topology"] = os.path.join(base, top)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    keys = _section_keys()
    for section, values in cfg.items():
        if section not in keys:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        unknown = set(values) - keys[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
        raise ConfigError(f"override {assignment!r} must look like section.key=value")
    lhs, raw = assignment.split("=", 1)
    section, key = lhs.split(".", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    cfg.setdefault(section, {})[key] = value
    validate_config(cfg)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:10]


def run_dir(root: str, command: str, cfg: dict) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(root, f"{command}-{config_hash(cfg)}-{stamp}")
    suffix = 1
    while os.path.exists(path):
        path = os.path.join(root, f"{command}-{config_hash(cfg)}-{stamp}-{suffix}")
        suffix += 1
    os.makedirs(path)
    with open(os.path.join(path, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    return path


def _emit(result: dict) -> None:
    print(json.dumps(result, sort_keys=True))


def _graph(cfg: dict, default=None) -> SkeletonGraph:
    top = cfg.get("data", {}).get("topology", default)
    if top is None:
        raise ConfigError("data.topology is required")
    return load_topology(top)


def _split_spec(value) -> Optional[SplitSpec]:
    if value is None:
        return None
    if value == "utd_mhad":
        return utd_mhad_split()
    if isinstance(value, dict):
        return SplitSpec(value.get("train_subjects", ()), value.get("test_subjects", ()))
    raise ConfigError(f"data.split must be 'utd_mhad' or an object, got {value!r}")


def _require_input(cfg: dict, what: str) -> str:
    path = cfg.get("data", {}).get("input")
    if not path:
        raise ConfigError(f"{what} needs data.input (or --input)")
    if not os.path.isdir(path):
        raise DataError(f"input directory {path!r} does not exist")
    return path


# -- commands --------------------------------------------------------------------
def cmd_synth(cfg: dict, out: str) -> dict:
    s = cfg.get("synth", {})
    ds = synthesize_dataset(
        classes=int(s.get("classes", 3)),
        samples_per_class=int(s.get("samples_per_class", 20)),
        num_nodes=int(s.get("num_nodes", 8)),
        frames=int(s.get("frames", 32)),
        sensors=int(s.get("sensors", 2)),
        seed=int(s.get("seed", 0)),
        noise=float(s.get("noise", 0.05)),
        imu_scale=float(s.get("imu_scale", 1.0)),
    )
    path = write_synthetic(ds, out)
    return {"manifest": path, "topology": os.path.join(out, "topology.json"), "samples": len(ds),
            "imu_only_pairs": ds.imu_only_pairs()}


def cmd_preprocess(cfg: dict, out: str) -> dict:
    """Load recordings, align modalities in time, pad to a common length and split."""
    data = cfg.get("data", {})
    if "manifest" not in data:
        raise ConfigError("preprocess needs data.manifest")
    manifest = load_manifest(data["manifest"])
    beside = os.path.join(manifest.root, "topology.json")
    graph = _graph(cfg, beside if os.path.exists(beside) else None)
    plan = FusionPlan.from_dict(cfg.get("fusion", {}))
    spec = _split_spec(data.get("split"))
    if spec is None:
        splits = {"all": manifest.recordings}
    else:
        tr, te = apply_split(manifest.recordings, spec)
        splits = {"train": tr, "test": te}
    sensors = data.get("sensors")
    loaded = {}
    for name, recs in splits.items():
        sk, imu, rgb = load_recordings(manifest, recs, data.get("num_joints", graph.n_nodes), sensors)
        loaded[name] = [align_blocks(a, b, c, plan.frame_stride) for a, b, c in zip(sk, imu, rgb)]
    # one length for every split so train and test tensors share a shape
    t = data.get("max_frames") or max(a[0].tensor.shape[2] for al in loaded.values() for a in al)
    written = {}
    for name, recs in splits.items():
        aligned = loaded[name]
        xs = np.stack([pad_or_crop(a[0].tensor.data, t, 2) for a in aligned])
        gtn.save(os.path.join(out, f"{name}.skeleton.gtn"), xs)
        has_imu = all(a[1] is not None for a in aligned)
        if has_imu:
            gtn.save(os.path.join(out, f"{name}.imu.gtn"), np.stack([pad_or_crop(a[1].tensor.data, t, 3) for a in aligned]))
        has_rgb = all(a[2] is not None for a in aligned)
        rgb_layout = None
        if has_rgb:
            rgb_layout = list(aligned[0][2].layout)
            axis = rgb_layout.index("T")
            gtn.save(os.path.join(out, f"{name}.rgb.gtn"), np.stack([pad_or_crop(a[2].tensor.data, t, axis) for a in aligned]))
        side = {
            "labels": [r.label for r in recs],
            "subjects": [r.subject for r in recs],
            "ids": [r.sample_id for r in recs],
            "classes": manifest.classes,
            "has_imu": has_imu,
            "rgb_layout": rgb_layout,
        }
        with open(os.path.join(out, f"{name}.json"), "w") as fh:
            json.dump(side, fh, indent=2)
        written[name] = len(recs)
    with open(os.path.join(out, "topology.json"), "w") as fh:
        json.dump(graph.to_dict(), fh, indent=2)
    return {"output": out, "samples": written, "frames": int(t)}


def _load_preprocessed(path: str, name: str):
    with open(os.path.join(path, f"{name}.json")) as fh:
        side = json.load(fh)
    sk = gtn.load(os.path.join(path, f"{name}.skeleton.gtn"))
    imu = gtn.load(os.path.join(path, f"{name}.imu.gtn")) if side.get("has_imu") else None
    rgb = gtn.load(os.path.join(path, f"{name}.rgb.gtn")) if side.get("rgb_layout") else None
    return side, sk, imu, rgb


def cmd_fuse(cfg: dict, out: str) -> dict:
    """Apply the fusion plan to preprocessed tensors."""
    src = _require_input(cfg, "fuse")
    plan = FusionPlan.from_dict(cfg.get("fusion", {}))
    graph = load_topology(os.path.join(src, "topology.json"))
    names = [n for n in ("train", "test", "all") if os.path.exists(os.path.join(src, f"{n}.json"))]
    if not names:
        raise DataError(f"{src} holds no preprocessed splits")
    # frames were already subsampled during preprocessing
    plan_aligned = FusionPlan.from_dict({**plan.to_dict(), "frame_stride": 1})
    shapes = {}
    for name in names:
        side, sk, imu, rgb = _load_preprocessed(src, name)
        if plan.imu_mode != "off" and imu is None:
            raise DataError(f"plan fuses IMU but split {name!r} has no IMU data")
        layout = tuple(side["rgb_layout"]) if side.get("rgb_layout") else None
        ds = fuse_blocks(
            [ModalityBlock(SKELETON, s) for s in sk],
            [ModalityBlock(IMU, v) for v in imu] if imu is not None and plan.imu_mode != "off" else [None] * len(sk),
            [ModalityBlock(RGB, r, layout) for r in rgb] if rgb is not None and (plan.rgb_mode != "off" or layout == ("T", "F")) else [None] * len(sk),
            side["labels"],
            graph,
            plan_aligned,
            subjects=side["subjects"],
            ids=side["ids"],
            classes=side["classes"],
        )
        ds.save(os.path.join(out, name))
        shapes[name] = list(ds.x.shape)
    return {"output": out, "shapes": shapes, "combination": plan.combination}


def _model_config(cfg: dict, ds: Optional[ArrayDataset] = None) -> ModelConfig:
    m = dict(cfg.get("model", {}))
    if ds is not None:
        _, persons, c, _, n = ds.x.shape
        m.setdefault("num_nodes", n)
        m.setdefault("num_persons", persons)
        if ds.rgb is not None and m.get("rgb_feature_dim"):
            c += int(m.get("rgb_embed_dim", 0))
        m.setdefault("in_channels", c)
        if "num_classes" not in m:
            m["num_classes"] = len(ds.classes) if ds.classes else int(ds.y.max()) + 1
    if "num_nodes" not in m:
        raise ConfigError("model.num_nodes is required")
    return ModelConfig.from_dict(m)


def _fused_splits(cfg: dict):
    src = _require_input(cfg, "this command")
    out = {}
    for name in ("train", "test", "all"):
        if os.path.exists(os.path.join(src, f"{name}.json")) and os.path.exists(os.path.join(src, f"{name}.gtn")):
            out[name] = ArrayDataset.load(os.path.join(src, name))
    if not out:
        raise DataError(f"{src} holds no fused datasets (run 'fuse' first)")
    return out


def cmd_train(cfg: dict, out: str) -> dict:
    splits = _fused_splits(cfg)
    train_ds = splits.get("train", splits.get("all"))
    test_ds = splits.get("test")
    mcfg = _model_config(cfg, train_ds)
    tcfg = TrainConfig.from_dict(cfg.get("train", {}))
    model = AGCN(mcfg, build_adjacency(train_ds.graph), seed=tcfg.seed)
    result = train(model, train_ds, tcfg, val=test_ds, log_path=os.path.join(out, "train_log.jsonl"))
    ckpt = os.path.join(out, "checkpoint.zip")
    save_checkpoint(ckpt, model, tcfg, result.optimizer, epoch=result.epochs_run, extra={"graph": train_ds.graph.to_dict()})
    summary = {
        "checkpoint": ckpt,
        "parameters": count_parameters(mcfg).total,
        "epochs": result.epochs_run,
        "final": result.history[-1],
        "train_report": evaluate(model, train_ds).to_dict(),
    }
    if test_ds is not None:
        rep = evaluate(model, test_ds)
        summary["test_report"] = rep.to_dict()
    return summary


def cmd_eval(cfg: dict, out: str) -> dict:
    data = cfg.get("data", {})
    ckpt = data.get("checkpoint")
    if not ckpt:
        raise ConfigError("eval needs data.checkpoint (or --checkpoint)")
    if not os.path.exists(ckpt):
        raise DataError(f"checkpoint {ckpt!r} does not exist")
    model, manifest, _ = load_checkpoint(ckpt)
    splits = _fused_splits(cfg)
    which = data.get("eval_split") or ("test" if "test" in splits else next(iter(splits)))
    if which not in splits:
        raise ConfigError(f"split {which!r} not found; have {sorted(splits)}")
    rep = evaluate(model, splits[which])
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(rep.to_dict(), fh, indent=2)
    with open(os.path.join(out, "confusion.csv"), "w") as fh:
        fh.write(rep.confusion_csv())
    return {"split": which, "samples": int(rep.confusion.sum()), **rep.to_dict()}


def cmd_param_count(cfg: dict, out: Optional[str]) -> dict:
    mcfg = _model_config(cfg)
    pc = count_parameters(mcfg)
    return {"total": pc.total, "breakdown": pc.breakdown}


def tiny_gradcheck(seed: int = 0, h: float = 1e-6) -> dict:
    """Finite-difference check of a tiny end-to-end model (N=4, 2 blocks, T=8) in double precision."""
    from .functional import softmax_cross_entropy
    from .gradcheck import grad_check, grad_check_params
    from .graph import chain_graph

    rng = np.random.default_rng(seed)
    g = chain_graph(4, center=1)
    cfg = ModelConfig(num_nodes=4, in_channels=3, num_classes=3, blocks=((8, 1), (8, 2)), temporal_kernel=3, embed_factor=4)
    model = AGCN(cfg, build_adjacency(g), seed=seed, dtype=np.float64)
    # nonzero B so its gradient path is exercised off the zero point
    for _, blk in enumerate(model.blocks):
        blk.gcn.B.data[...] = 0.1 * rng.standard_normal(blk.gcn.B.shape)
    x = rng.standard_normal((2, 1, 3, 8, 4))
    y = [0, 2]
    errors = grad_check_params(lambda: softmax_cross_entropy(model(x), y), model.named_parameters(), h)
    errors["input"] = grad_check(lambda t: softmax_cross_entropy(model(t), y), x, h)
    worst = max(errors, key=errors.get)
    return {"max_rel_error": errors[worst], "worst": worst, "checked": len(errors), "passed": errors[worst] < 1e-4}


def cmd_gradcheck(cfg: dict, out: Optional[str], seed: int = 0) -> dict:
    return tiny_gradcheck(seed)


# -- entry point -----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphfuse", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config path or bundled config name")
    p.add_argument("--seed", type=int, help="overrides train.seed and synth.seed")
    p.add_argument("--out", default="runs", help="root directory for run outputs")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. train.epochs=5")
    p.add_argument("--input", help="input directory (sets data.input)")
    p.add_argument("--checkpoint", help="checkpoint archive (sets data.checkpoint)")
    p.add_argument("--split", help="split to evaluate (sets data.eval_split)")
    p.add_argument("--tiny", action="store_true", help="gradcheck: tiny end-to-end model")
    p.add_argument("--classes", type=int, help="synth: number of classes")
    p.add_argument("--samples-per-class", type=int, help="synth: samples per class")
    p.add_argument("--nodes", type=int, help="synth: skeleton nodes")
    p.add_argument("--frames", type=int, help="synth: frames per sequence")
    p.add_argument("--sensors", type=int, help="synth: IMU sensors")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = copy.deepcopy(load_config(args.config))
        for a in args.set:
            apply_override(cfg, a)
        flag_map = {
            "input": ("data", "input", args.input and os.path.abspath(args.input)),
            "checkpoint": ("data", "checkpoint", args.checkpoint and os.path.abspath(args.checkpoint)),
            "split": ("data", "eval_split", args.split),
            "classes": ("synth", "classes", args.classes),
            "samples_per_class": ("synth", "samples_per_class", args.samples_per_class),
            "nodes": ("synth", "num_nodes", args.nodes),
            "frames": ("synth", "frames", args.frames),
            "sensors": ("synth", "sensors", args.sensors),
        }
        for section, key, value in flag_map.values():
            if value is not None:
                cfg.setdefault(section, {})[key] = value
        if args.seed is not None:
            cfg.setdefault("train", {})["seed"] = args.seed
            if args.command == "synth":
                cfg.setdefault("synth", {})["seed"] = args.seed
        validate_config(cfg)

        if args.command == "param-count":
            result = cmd_param_count(cfg, None)
        elif args.command == "gradcheck":
            result = cmd_gradcheck(cfg, None, args.seed or 0)
            _emit(result)
            return 0 if result["passed"] else 1
        else:
            out = run_dir(args.out, args.command, cfg)
            handler = {
                "synth": cmd_synth,
                "preprocess": cmd_preprocess,
                "fuse": cmd_fuse,
                "train": cmd_train,
                "eval": cmd_eval,
            }[args.command]
            result = handler(cfg, out)
            result.setdefault("run_dir", out)
        _emit(result)
        return 0
    except (ConfigError, UsageError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except GraphFuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
