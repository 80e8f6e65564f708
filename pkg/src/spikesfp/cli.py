"""Command-line entry point: ``spikesfp simulate|encode|train|eval|profile``.

Configs are INI-style ``key = value`` files with section headers:

    [dataset]      scenes (count or comma list of kinds), height, width, seed
    [simulator]    contrast_threshold, step_degrees, total_rotation_degrees,
                   angular_speed, threshold_jitter, noise_seed
    [network]      bins, depth, base_channels, upsample, mode, neuron.kind, ...
    [train]        epochs, batch_size, lr, beta1, beta2, eps, clip_norm, seed, all_pixels

Command-line flags win over the file, which wins over built-in defaults.
Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io as _io
import json
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, io
from .autodiff import DimensionError
from .data import Sample, load_dataset
from .encoding import build_voxel_grid, build_cvgr, build_cvgri
from .energy import count_ops, merge_traces, profile_inference, rate_table, report_csv
from .events import (SimulationError, SimulatorConfig, plane_scene, ramp_scene,
                     random_composite_scene, simulate_events, sphere_cap_scene)
from .training import TrainConfig, TrainingDivergedError, angular_metrics, train
from .unet import NetworkConfig, SpikingUNet

log = logging.getLogger("spikesfp")

SCENE_KINDS = ("composite", "sphere", "plane", "ramp")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --- config plumbing -----------------------------------------------------------


def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep neuron.kind etc. verbatim
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise UsageError(f"malformed config {path}: {exc}") from exc
    return cp


def _section(cp, name) -> dict[str, str]:
    return dict(cp[name]) if cp.has_section(name) else {}


def _get(sec: dict, key: str, cast, default):
    if key not in sec or sec[key] == "":
        return default
    try:
        return cast(sec[key])
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {sec[key]!r}") from exc


def simulator_config(cp) -> SimulatorConfig:
    sec = _section(cp, "simulator")
    d = SimulatorConfig()
    try:
        return SimulatorConfig(
            contrast_threshold=_get(sec, "contrast_threshold", float, d.contrast_threshold),
            angular_speed=_get(sec, "angular_speed", float, d.angular_speed),
            total_rotation=math.radians(_get(sec, "total_rotation_degrees", float, math.degrees(d.total_rotation))),
            step=math.radians(_get(sec, "step_degrees", float, math.degrees(d.step))),
            noise_seed=_get(sec, "noise_seed", int, d.noise_seed),
            threshold_jitter=_get(sec, "threshold_jitter", float, d.threshold_jitter),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def network_config(cp, args=None) -> NetworkConfig:
    raw = _section(cp, "network")
    if args is not None:
        for flag, key in (("mode", "mode"), ("upsample", "upsample"), ("neuron", "neuron.kind")):
            if getattr(args, flag, None) is not None:
                raw[key] = getattr(args, flag)
    try:
        return NetworkConfig.from_mapping(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"network config: {exc}") from exc


def train_config(cp, seed=None) -> TrainConfig:
    sec = _section(cp, "train")
    d = TrainConfig()
    try:
        return TrainConfig(
            epochs=_get(sec, "epochs", int, d.epochs),
            batch_size=_get(sec, "batch_size", int, d.batch_size),
            lr=_get(sec, "lr", float, d.lr),
            beta1=_get(sec, "beta1", float, d.beta1),
            beta2=_get(sec, "beta2", float, d.beta2),
            eps=_get(sec, "eps", float, d.eps),
            clip_norm=_get(sec, "clip_norm", float, d.clip_norm),
            seed=seed if seed is not None else _get(sec, "seed", int, d.seed),
            all_pixels=_get(sec, "all_pixels", lambda v: v.lower() in ("1", "true", "yes"), d.all_pixels),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def write_manifest(out: Path, command: str, args, inputs: dict, outputs: list[str], **extra) -> None:
    manifest = {
        "command": command,
        "config": None if getattr(args, "config", None) is None else str(args.config),
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": sorted(outputs),
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        **extra,
    }
    io.atomic_write(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _csv_text(rows: list[list]) -> bytes:
    buf = _io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue().encode()


# --- commands -----------------------------------------------------------------


def _build_scene(kind: str, rng: np.random.Generator, h: int, w: int):
    if kind == "composite":
        return random_composite_scene(rng, h, w)
    if kind == "sphere":
        return sphere_cap_scene(h, w)
    if kind == "plane":
        return plane_scene(h, w, azimuth=rng.uniform(0, 2 * np.pi), zenith=rng.uniform(0, math.radians(60)))
    if kind == "ramp":
        return ramp_scene(h, w, azimuth=rng.uniform(0, 2 * np.pi))
    raise UsageError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")


def scene_kinds(spec: str) -> list[str]:
    spec = spec.strip()
    if spec.isdigit():
        return ["composite"] * int(spec)
    kinds = [k.strip() for k in spec.split(",") if k.strip()]
    bad = [k for k in kinds if k not in SCENE_KINDS]
    if bad or not kinds:
        raise UsageError(f"invalid scene list {spec!r}")
    return kinds


def cmd_simulate(args) -> None:
    cp = read_config(args.config)
    sec = _section(cp, "dataset")
    kinds = scene_kinds(sec.get("scenes", "4"))
    h = _get(sec, "height", int, 64)
    w = _get(sec, "width", int, 64)
    seed = args.seed if args.seed is not None else _get(sec, "seed", int, 0)
    sim = simulator_config(cp)
    rng = np.random.default_rng(seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    entries, written = [], []
    for i, kind in enumerate(kinds):
        name = f"scene_{i:03d}"
        scene = _build_scene(kind, rng, h, w)
        try:
            stream, normals, i0 = simulate_events(scene, sim)
        except SimulationError as exc:
            raise DataError(f"{name}: {exc}") from exc
        try:
            io.write_events(out / f"{name}.pevt", stream)
            io.write_normals(out / f"{name}.pnrm", normals)
            io.write_image(out / f"{name}.pimg", i0)
        except OSError as exc:
            raise DataError(f"cannot write to {out}: {exc}") from exc
        written += [f"{name}.pevt", f"{name}.pnrm", f"{name}.pimg"]
        entries.append({"name": name, "kind": kind, "events": len(stream), "duration_us": stream.duration})
        log.info("%s: %s, %d events", name, kind, len(stream))
    simulator = {"contrast_threshold": sim.contrast_threshold, "angular_speed": sim.angular_speed,
                 "total_rotation": sim.total_rotation, "step": sim.step, "noise_seed": sim.noise_seed,
                 "threshold_jitter": sim.threshold_jitter}
    write_manifest(out, "simulate", args, {}, written, scenes=entries, simulator=simulator,
                   resolution=[h, w])


def _dataset(path, bins: int) -> list[Sample]:
    try:
        samples = load_dataset(path, bins)
    except (OSError, io.FormatError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if not samples:
        raise DataError(f"{path}: dataset has no scenes")
    return samples


def cmd_encode(args) -> None:
    src = Path(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
        threshold = float(manifest["simulator"]["contrast_threshold"])
        written = []
        for entry in manifest["scenes"]:
            name = entry["name"]
            stream = io.read_events(src / f"{name}.pevt", duration=int(entry["duration_us"]))
            i0 = io.read_image(src / f"{name}.pimg")
            grid = build_voxel_grid(stream, args.bins)
            io.write_cvgri(out / f"{name}.pcvg", build_cvgri(build_cvgr(grid, threshold), i0, threshold))
            written.append(f"{name}.pcvg")
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    write_manifest(out, "encode", args, {"dataset": str(src)}, written, bins=args.bins)


def cmd_train(args) -> None:
    cp = read_config(args.config)
    nc = network_config(cp, args)
    tc = train_config(cp, args.seed)
    if args.epochs is not None:
        tc.epochs = args.epochs
    samples = _dataset(args.dataset, nc.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["epoch", "loss", "MAE", "AE11.25", "AE22.5", "AE30"]
    rows: list[list] = [header]

    def checkpoint(epoch, network, row):
        if row is not None:
            rows.append([row[k] for k in header])
        io.write_weights(out / "model.pwts", network.state_dict())
        io.atomic_write(out / "history.csv", _csv_text(rows))

    io.atomic_write(out / "model.cfg", ("[network]\n" + nc.to_text()).encode())
    try:
        network = SpikingUNet(nc, seed=tc.seed)
        checkpoint(0, network, None)
        train(samples, nc, tc, network=network, on_epoch_end=checkpoint)
    except DimensionError as exc:
        raise DataError(f"incompatible shapes: {exc}") from exc
    except TrainingDivergedError as exc:
        io.write_weights(out / "model.pwts", exc.last_good)
        raise DataError(str(exc)) from exc
    finally:
        write_manifest(out, "train", args, {"dataset": str(args.dataset)},
                       ["model.pwts", "model.cfg", "history.csv"],
                       network=nc.to_text().splitlines(), train=vars(tc))


def load_checkpoint(path) -> SpikingUNet:
    path = Path(path)
    cfg_path = path.with_name("model.cfg") if not path.with_suffix(".cfg").exists() else path.with_suffix(".cfg")
    try:
        nc = NetworkConfig.from_text(cfg_path.read_text())
        state = io.read_weights(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc
    except (io.FormatError, ValueError, TypeError) as exc:
        raise DataError(f"bad checkpoint: {exc}") from exc
    network = SpikingUNet(nc)
    try:
        network.load_state_dict(state)
    except (KeyError, DimensionError) as exc:
        raise DataError(f"schema error: checkpoint does not match {cfg_path.name}: {exc}") from exc
    return network


def cmd_eval(args) -> None:
    network = load_checkpoint(args.checkpoint)
    samples = _dataset(args.dataset, network.config.bins)
    header = ["scene", "MAE", "AE11.25", "AE22.5", "AE30", "pixels"]
    rows, metrics = [header], []
    network.eval()
    for s in samples:
        try:
            pred = s.normals if args.oracle else network.predict(s.cvgri[None]).values[0]
        except DimensionError as exc:
            raise DataError(f"{s.name}: {exc}") from exc
        rep = angular_metrics(pred, s.normals, s.mask)
        vals = [rep.mae, rep.ae_11, rep.ae_22, rep.ae_30]
        metrics.append(vals)
        rows.append([s.name, *vals, rep.pixels])
    mean = np.mean(metrics, axis=0).tolist()
    rows.append(["mean", *mean, sum(r[-1] for r in rows[1:])])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.atomic_write(out / "eval.csv", _csv_text(rows))
    write_manifest(out, "eval", args, {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset)},
                   ["eval.csv"])
    print(f"MAE {mean[0]:.3f}  AE<11.25 {mean[1]:.4f}  AE<22.5 {mean[2]:.4f}  AE<30 {mean[3]:.4f}")


def cmd_profile(args) -> None:
    network = load_checkpoint(args.checkpoint)
    samples = _dataset(args.dataset, network.config.bins)
    runs = []
    for s in samples:
        try:
            traces, _ = profile_inference(network, s.cvgri[None])
        except DimensionError as exc:
            raise DataError(f"{s.name}: {exc}") from exc
        runs.append(traces)
    traces = merge_traces(runs)
    ann = count_ops(traces, network, ann_mode=True)
    report = count_ops(traces, network, reference=ann)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.atomic_write(out / "energy.csv", report_csv(traces, report).encode())
    io.atomic_write(out / "rates.txt", rate_table(traces).encode())
    write_manifest(out, "profile", args, {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset)},
                   ["energy.csv", "rates.txt"])
    print(f"{report.energy_joules * 1e3 / len(samples):.6f} mJ per scene, "
          f"{report.benefit:.2f}x below the dense equivalent")


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spikesfp", description="Event-based shape from polarization with spiking UNets.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="render scenes and write events, normals and first frames")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("encode", help="write CVGR-I tensors for a simulated dataset")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--bins", type=int, default=8)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("train", help="train a spiking UNet on a dataset directory")
    s.add_argument("dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--mode", choices=("single", "multi"))
    s.add_argument("--upsample", choices=("nearest", "bilinear"))
    s.add_argument("--neuron", choices=("if", "lif", "plif"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="angular error metrics per scene and on average")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("profile", help="spike-count energy estimate and per-layer rates")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_profile)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"spikesfp: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"spikesfp: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
